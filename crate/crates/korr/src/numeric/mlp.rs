//! Fully connected perceptrons with hand-derived backpropagation.
//!
//! Hidden layers use the configured activation (ReLU by default); the last
//! layer is always affine. Weights are stored `(out, in)` so a batch of
//! inputs `X` (one sample per row) maps to `X W^T + b`.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::matrix::gemm;
use super::{Matrix, Parameters};
use crate::error::{contract_err, dim_err, Result};

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    // ReLU subgradient at exactly 0 is 0.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpParams {
    layer_sizes: Vec<usize>,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
    hidden_activation: Activation,
    output_bias: bool,
    #[serde(skip, default = "next_generation")]
    generation: u64,
}

impl PartialEq for MlpParams {
    fn eq(&self, other: &Self) -> bool {
        self.layer_sizes == other.layer_sizes
            && self.weights == other.weights
            && self.biases == other.biases
            && self.hidden_activation == other.hidden_activation
            && self.output_bias == other.output_bias
    }
}

/// Activations recorded by a forward pass, consumed by [`MlpParams::backward`].
#[derive(Debug, Clone)]
pub struct MlpCache {
    generation: u64,
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<Matrix>,
    /// Pre-activation of each hidden layer.
    preacts: Vec<Matrix>,
}

impl MlpCache {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].rows()
    }

    /// Smallest |pre-activation| over all hidden units, used to steer
    /// finite-difference checks away from ReLU kinks.
    pub fn min_abs_preactivation(&self) -> f64 {
        self.preacts
            .iter()
            .flat_map(|m| m.data().iter())
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

impl MlpParams {
    /// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for every
    /// weight and bias.
    pub fn new<R: Rng + ?Sized>(layer_sizes: &[usize], hidden_activation: Activation, rng: &mut R) -> Self {
        assert!(layer_sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..=bound))
                .collect();
            weights.push(Matrix::from_vec(fan_out, fan_in, data).expect("sized above"));
            biases.push((0..fan_out).map(|_| rng.gen_range(-bound..=bound)).collect());
        }
        Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            hidden_activation,
            output_bias: true,
            generation: next_generation(),
        }
    }

    /// Same architecture, all parameters zero. Doubles as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        Self {
            layer_sizes: self.layer_sizes.clone(),
            weights: self
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            biases: self.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            hidden_activation: self.hidden_activation,
            output_bias: self.output_bias,
            generation: next_generation(),
        }
    }

    /// Zeroes the output layer so the network starts at a zero output.
    pub fn with_zero_output(mut self) -> Self {
        let last = self.weights.len() - 1;
        self.weights[last].data_mut().fill(0.0);
        self.biases[last].fill(0.0);
        self.generation = next_generation();
        self
    }

    /// Orthogonal rows of norm `gain` in the output layer and a constant bias.
    pub fn with_orthogonal_output<R: Rng + ?Sized>(mut self, gain: f64, bias: f64, rng: &mut R) -> Self {
        let last = self.weights.len() - 1;
        let (rows, cols) = self.weights[last].shape();
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for _ in 0..rows {
            let mut v: Vec<f64> = (0..cols).map(|_| rng.sample(StandardNormal)).collect();
            for u in &basis {
                let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
            }
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-300);
            v.iter_mut().for_each(|a| *a /= n);
            basis.push(v);
        }
        for (r, v) in basis.iter().enumerate() {
            for (c, x) in v.iter().enumerate() {
                self.weights[last].set(r, c, gain * x);
            }
        }
        self.biases[last].fill(bias);
        self.generation = next_generation();
        self
    }

    /// Removes the trainable bias of the output layer (held at zero).
    pub fn without_output_bias(mut self) -> Self {
        let last = self.biases.len() - 1;
        self.biases[last].fill(0.0);
        self.output_bias = false;
        self.generation = next_generation();
        self
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("non-empty")
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    pub fn has_output_bias(&self) -> bool {
        self.output_bias
    }

    /// Rebuilds parameters from raw blocks, validating every shape.
    pub fn from_parts(
        layer_sizes: Vec<usize>,
        weights: Vec<Matrix>,
        biases: Vec<Vec<f64>>,
        hidden_activation: Activation,
        output_bias: bool,
    ) -> Result<Self> {
        if layer_sizes.len() < 2
            || weights.len() != layer_sizes.len() - 1
            || biases.len() != weights.len()
        {
            return Err(dim_err!(
                "{} layer sizes with {} weight and {} bias blocks",
                layer_sizes.len(),
                weights.len(),
                biases.len()
            ));
        }
        for (i, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.shape() != (layer_sizes[i + 1], layer_sizes[i]) || b.len() != layer_sizes[i + 1] {
                return Err(dim_err!(
                    "layer {}: weight {:?}, bias {} for sizes {} -> {}",
                    i,
                    w.shape(),
                    b.len(),
                    layer_sizes[i],
                    layer_sizes[i + 1]
                ));
            }
        }
        Ok(Self {
            layer_sizes,
            weights,
            biases,
            hidden_activation,
            output_bias,
            generation: next_generation(),
        })
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.data().len()).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// Batched forward pass, one sample per row of `x`.
    pub fn forward_batch(&self, x: &Matrix) -> Result<(Matrix, MlpCache)> {
        if x.cols() != self.input_dim() {
            return Err(dim_err!(
                "network expects inputs of width {}, got {}",
                self.input_dim(),
                x.cols()
            ));
        }
        let n_layers = self.weights.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut preacts = Vec::with_capacity(n_layers - 1);
        let mut current = x.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = Matrix::zeros(current.rows(), w.rows());
            gemm(1.0, &current, false, w, true, 0.0, &mut z);
            if l + 1 < n_layers || self.output_bias {
                for r in 0..z.rows() {
                    z.row_mut(r).iter_mut().zip(b).for_each(|(v, bi)| *v += bi);
                }
            }
            inputs.push(current);
            if l + 1 < n_layers {
                let act = self.hidden_activation;
                let mut a = z.clone();
                a.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
                preacts.push(z);
                current = a;
            } else {
                current = z;
            }
        }
        Ok((
            current,
            MlpCache {
                generation: self.generation,
                inputs,
                preacts,
            },
        ))
    }

    /// Single-sample forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        let (out, cache) = self.forward_batch(&Matrix::row_vector(x))?;
        Ok((out.into_vec(), cache))
    }

    /// Forward pass without keeping the cache.
    pub fn predict_batch(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_batch(x)?.0)
    }

    /// Gradients with respect to parameters and input, given the gradient of
    /// a scalar loss with respect to the output batch.
    pub fn backward(&self, cache: &MlpCache, output_grad: &Matrix) -> Result<(MlpParams, Matrix)> {
        if cache.generation != self.generation {
            return Err(contract_err!(
                "activation cache was produced by different or since-modified parameters"
            ));
        }
        if cache.inputs.len() != self.weights.len() {
            return Err(contract_err!(
                "cache has {} layers, network has {}",
                cache.inputs.len(),
                self.weights.len()
            ));
        }
        let batch = cache.batch_size();
        if output_grad.shape() != (batch, self.output_dim()) {
            return Err(dim_err!(
                "output gradient {:?} does not match batch {} x {}",
                output_grad.shape(),
                batch,
                self.output_dim()
            ));
        }
        let mut grads = self.zeros_like();
        let mut delta = output_grad.clone();
        for l in (0..self.weights.len()).rev() {
            let w = &self.weights[l];
            gemm(1.0, &delta, true, &cache.inputs[l], false, 0.0, &mut grads.weights[l]);
            let gb = &mut grads.biases[l];
            for r in 0..delta.rows() {
                gb.iter_mut().zip(delta.row(r)).for_each(|(g, d)| *g += d);
            }
            let mut prev = Matrix::zeros(batch, w.cols());
            gemm(1.0, &delta, false, w, false, 0.0, &mut prev);
            if l > 0 {
                let act = self.hidden_activation;
                prev.data_mut()
                    .iter_mut()
                    .zip(cache.preacts[l - 1].data())
                    .for_each(|(g, z)| *g *= act.derivative(*z));
            }
            delta = prev;
        }
        if !self.output_bias {
            grads.biases.last_mut().expect("non-empty").fill(0.0);
        }
        Ok((grads, delta))
    }

    /// Single-sample backward pass.
    pub fn backward_vec(&self, cache: &MlpCache, output_grad: &[f64]) -> Result<(MlpParams, Vec<f64>)> {
        let (g, dx) = self.backward(cache, &Matrix::row_vector(output_grad))?;
        Ok((g, dx.into_vec()))
    }

    /// FNV-1a over the exact bit patterns of every parameter.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for s in self.slices() {
            for v in s {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

impl Parameters for MlpParams {
    fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.data());
            out.push(b);
        }
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.generation = next_generation();
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.data_mut());
            out.push(b.as_mut_slice());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::gradcheck::{grad_check, GradCheckConfig};
    use crate::numeric::{flatten, unflatten_into};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = MlpParams::new(&[3, 4, 2], Activation::Relu, &mut rng(0)).zeros_like();
        let (y, _) = p.forward(&[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn single_layer_is_affine() {
        let w = Matrix::from_rows(&[[1.0, 2.0], [-1.0, 0.5]]).unwrap();
        let p = MlpParams::from_parts(vec![2, 2], vec![w], vec![vec![0.5, -1.0]], Activation::Relu, true).unwrap();
        let (y, _) = p.forward(&[3.0, 4.0]).unwrap();
        assert_eq!(y, vec![1.0 * 3.0 + 2.0 * 4.0 + 0.5, -3.0 + 2.0 - 1.0]);
    }

    #[test]
    fn two_layer_hand_trace() {
        // h = relu(W1 x + b1), y = W2 h + b2, traced by hand below.
        let w1 = Matrix::from_rows(&[[0.5, -1.0], [2.0, 0.25]]).unwrap();
        let w2 = Matrix::from_rows(&[[1.5, -0.5]]).unwrap();
        let p = MlpParams::from_parts(
            vec![2, 2, 1],
            vec![w1, w2],
            vec![vec![0.1, -0.2], vec![0.3]],
            Activation::Relu,
            true,
        )
        .unwrap();
        let x = [1.0, 2.0];
        // unit 0: 0.5 - 2.0 + 0.1 = -1.4 -> 0 ; unit 1: 2.0 + 0.5 - 0.2 = 2.3
        let expected = 1.5 * 0.0 - 0.5 * 2.3 + 0.3;
        let (y, _) = p.forward(&x).unwrap();
        assert!((y[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn wrong_input_length_is_dimension_error() {
        let p = MlpParams::new(&[3, 4, 2], Activation::Relu, &mut rng(0));
        assert!(matches!(p.forward(&[1.0]), Err(crate::KorrError::Dimension(_))));
    }

    #[test]
    fn zero_output_grad_gives_zero_grads() {
        let p = MlpParams::new(&[3, 5, 2], Activation::Relu, &mut rng(1));
        let (_, cache) = p.forward(&[0.3, -0.1, 0.7]).unwrap();
        let (g, dx) = p.backward_vec(&cache, &[0.0, 0.0]).unwrap();
        assert!(g.slices().iter().all(|s| s.iter().all(|v| *v == 0.0)));
        assert!(dx.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_layer_weight_grad_is_outer_product() {
        let p = MlpParams::new(&[3, 2], Activation::Relu, &mut rng(2));
        let x = [0.5, -1.0, 2.0];
        let gy = [0.25, -3.0];
        let (_, cache) = p.forward(&x).unwrap();
        let (g, _) = p.backward_vec(&cache, &gy).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert_eq!(g.weights()[0].get(r, c), gy[r] * x[c]);
            }
            assert_eq!(g.biases()[0][r], gy[r]);
        }
    }

    #[test]
    fn stale_cache_is_contract_error() {
        let mut p = MlpParams::new(&[2, 3, 1], Activation::Relu, &mut rng(3));
        let (_, cache) = p.forward(&[1.0, 1.0]).unwrap();
        p.slices_mut()[0][0] += 1.0;
        assert!(matches!(
            p.backward_vec(&cache, &[1.0]),
            Err(crate::KorrError::Contract(_))
        ));
        let other = MlpParams::new(&[2, 3, 1], Activation::Relu, &mut rng(4));
        assert!(other.backward_vec(&cache, &[1.0]).is_err());
    }

    #[test]
    fn backward_matches_finite_differences_on_three_layer_net() {
        for seed in 0..5 {
            let mut r = rng(100 + seed);
            let p = MlpParams::new(&[4, 6, 5, 3], Activation::Relu, &mut r);
            let x = Matrix::from_vec(3, 4, (0..12).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
            let target = Matrix::from_vec(3, 3, (0..9).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
            let (_, cache) = p.forward_batch(&x).unwrap();
            if cache.min_abs_preactivation() < 1e-6 {
                continue;
            }
            let loss = |q: &MlpParams| -> (f64, MlpParams) {
                let (y, cache) = q.forward_batch(&x).unwrap();
                let diff = y.sub(&target).unwrap();
                let l = 0.5 * diff.data().iter().map(|v| v * v).sum::<f64>();
                let (g, _) = q.backward(&cache, &diff).unwrap();
                (l, g)
            };
            let theta = flatten(&p);
            let (_, g) = loss(&p);
            let analytic = flatten(&g);
            let mut probe = p.clone();
            let report = grad_check(
                |v: &[f64]| {
                    unflatten_into(&mut probe, v);
                    loss(&probe).0
                },
                &theta,
                &analytic,
                &GradCheckConfig::default(),
            )
            .unwrap();
            assert!(report.passed, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn orthogonal_output_rows_have_gain_norm() {
        let p = MlpParams::new(&[4, 8, 1], Activation::Relu, &mut rng(5))
            .with_orthogonal_output(0.25, 0.25, &mut rng(6));
        let w = &p.weights()[1];
        let n: f64 = w.row(0).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 0.25).abs() < 1e-12);
        assert_eq!(p.biases()[1], vec![0.25]);
    }
}
