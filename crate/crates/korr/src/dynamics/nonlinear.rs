//! Unconstrained next-state predictor `x' = net(x, a)`.

use rand::Rng;

use crate::error::{dim_err, Result};
use crate::numeric::{Activation, Matrix, MlpCache, MlpParams, Parameters};

#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearDynModel {
    /// Maps `state ++ action` to the predicted next state.
    pub net: MlpParams,
}

#[derive(Debug, Clone)]
pub struct NonlinearCache {
    net: MlpCache,
}

impl NonlinearDynModel {
    /// `depth` hidden ReLU layers of `width` units each.
    pub fn new<R: Rng + ?Sized>(state_dim: usize, action_dim: usize, depth: usize, width: usize, rng: &mut R) -> Self {
        let mut sizes = vec![state_dim + action_dim];
        sizes.extend(std::iter::repeat(width).take(depth));
        sizes.push(state_dim);
        Self {
            net: MlpParams::new(&sizes, Activation::Relu, rng),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.net.input_dim() - self.net.output_dim()
    }

    /// Number of hidden layers.
    pub fn depth(&self) -> usize {
        self.net.layer_sizes().len() - 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.net.input_dim() <= self.net.output_dim() {
            return Err(dim_err!(
                "nonlinear dynamics maps {} -> {}; input must be state plus action",
                self.net.input_dim(),
                self.net.output_dim()
            ));
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            net: self.net.zeros_like(),
        }
    }

    fn joined(&self, x: &Matrix, u: &Matrix) -> Result<Matrix> {
        if x.cols() != self.state_dim() || u.cols() != self.action_dim() || x.rows() != u.rows() {
            return Err(dim_err!(
                "nonlinear dynamics input {:?} / {:?} for state {} action {}",
                x.shape(),
                u.shape(),
                self.state_dim(),
                self.action_dim()
            ));
        }
        x.hcat(u)
    }

    pub fn predict(&self, x: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .predict_batch(&Matrix::row_vector(x), &Matrix::row_vector(a))?
            .into_vec())
    }

    pub fn predict_batch(&self, x: &Matrix, u: &Matrix) -> Result<Matrix> {
        self.net.predict_batch(&self.joined(x, u)?)
    }

    pub fn imagine_batch(&self, x: &Matrix, u: &Matrix) -> Result<(Matrix, NonlinearCache)> {
        let (out, net) = self.net.forward_batch(&self.joined(x, u)?)?;
        Ok((out, NonlinearCache { net }))
    }

    pub fn imagine_backward(&self, cache: &NonlinearCache, d_out: &Matrix) -> Result<NonlinearDynModel> {
        let (net, _) = self.net.backward(&cache.net, d_out)?;
        Ok(Self { net })
    }

    /// Mean over the batch of `||net(x, a) - x'||^2` and its gradient.
    pub fn loss_batch(&self, x: &Matrix, u: &Matrix, x_next: &Matrix) -> Result<(f64, NonlinearDynModel)> {
        if x_next.shape() != x.shape() {
            return Err(dim_err!("next-state batch {:?} vs {:?}", x_next.shape(), x.shape()));
        }
        let (pred, cache) = self.imagine_batch(x, u)?;
        let resid = pred.sub(x_next)?;
        let inv_n = 1.0 / x.rows().max(1) as f64;
        let loss = resid.data().iter().map(|r| r * r).sum::<f64>() * inv_n;
        let grads = self.imagine_backward(&cache, &resid.scale(2.0 * inv_n))?;
        Ok((loss, grads))
    }
}

impl Parameters for NonlinearDynModel {
    fn slices(&self) -> Vec<&[f64]> {
        self.net.slices()
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.net.slices_mut()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::gradcheck::{grad_check, GradCheckConfig};
    use crate::numeric::{flatten, unflatten_into};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_weight_net_predicts_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = NonlinearDynModel::new(4, 2, 2, 8, &mut rng).zeros_like();
        let out = model.predict(&[1.0, -2.0, 0.5, 3.0], &[0.1, 0.2]).unwrap();
        assert_eq!(out, vec![0.0; 4]);
    }

    #[test]
    fn depth_and_dims_are_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = NonlinearDynModel::new(11, 3, 4, 16, &mut rng);
        assert_eq!((model.state_dim(), model.action_dim(), model.depth()), (11, 3, 4));
        model.validate().unwrap();
    }

    #[test]
    fn wrong_action_width_is_dimension_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = NonlinearDynModel::new(4, 2, 2, 8, &mut rng);
        assert!(matches!(
            model.predict(&[0.0; 4], &[0.0; 3]),
            Err(crate::KorrError::Dimension(_))
        ));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = NonlinearDynModel::new(4, 2, 2, 6, &mut rng);
            let (x, u, xn) = (random(7, 4, &mut rng), random(7, 2, &mut rng), random(7, 4, &mut rng));
            let (_, grads) = model.loss_batch(&x, &u, &xn).unwrap();
            let mut probe = model.clone();
            let report = grad_check(
                |p| {
                    unflatten_into(&mut probe, p);
                    probe.loss_batch(&x, &u, &xn).unwrap().0
                },
                &flatten(&model),
                &flatten(&grads),
                &GradCheckConfig::default(),
            )
            .unwrap();
            assert!(report.passed, "seed {seed}: {}", report.max_relative_error);
        }
    }
}
