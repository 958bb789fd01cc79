//! Learned lift `g` with linear latent evolution `z' = A z + B a`.

use rand::Rng;

use crate::error::{contract_err, dim_err, Result};
use crate::numeric::{gemm, Activation, Matrix, MlpCache, MlpParams, Parameters};

/// Observable map from state to latent space.
#[derive(Debug, Clone, PartialEq)]
pub enum Lift {
    Network(MlpParams),
    /// Debug lift `g(x) = x`; has no parameters.
    Identity { dim: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct KoopmanModel {
    pub lift: Lift,
    /// Latent evolution, `m x m`.
    pub transition: Matrix,
    /// Control input map, `m x action_dim`.
    pub input: Matrix,
}

/// A lifted state `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState(pub Vec<f64>);

/// Activations kept by [`KoopmanModel::imagine_batch`] for backpropagation.
#[derive(Debug, Clone)]
pub struct ImagineCache {
    lift: Option<MlpCache>,
    z: Matrix,
    u: Matrix,
}

impl ImagineCache {
    /// Lifted current states of the batch.
    pub fn lifted(&self) -> &Matrix {
        &self.z
    }
}

/// Transition used by the prediction loss. Episode tags let the loss reject
/// pairs that straddle an episode boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub next_state: Vec<f64>,
    pub episode: u64,
    pub next_episode: u64,
}

/// Stacks transitions into `(X, U, X')`, rejecting cross-episode pairs.
pub fn stack_transitions(batch: &[Transition]) -> Result<(Matrix, Matrix, Matrix)> {
    if let Some((i, t)) = batch.iter().enumerate().find(|(_, t)| t.episode != t.next_episode) {
        return Err(contract_err!(
            "transition {} pairs a state from episode {} with a successor from episode {}",
            i,
            t.episode,
            t.next_episode
        ));
    }
    let x = Matrix::from_rows(&batch.iter().map(|t| t.state.as_slice()).collect::<Vec<_>>())?;
    let u = Matrix::from_rows(&batch.iter().map(|t| t.action.as_slice()).collect::<Vec<_>>())?;
    let xn = Matrix::from_rows(&batch.iter().map(|t| t.next_state.as_slice()).collect::<Vec<_>>())?;
    Ok((x, u, xn))
}

impl KoopmanModel {
    /// Network lift with `A = I` and `B = 0`.
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        lift_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Self {
        let mut sizes = vec![state_dim];
        sizes.extend(hidden);
        sizes.push(lift_dim);
        Self {
            lift: Lift::Network(MlpParams::new(&sizes, Activation::Relu, rng)),
            transition: Matrix::identity(lift_dim),
            input: Matrix::zeros(lift_dim, action_dim),
        }
    }

    /// Identity lift (`m = state_dim`), `A = I`, `B = 0`.
    pub fn identity_lift(state_dim: usize, action_dim: usize) -> Self {
        Self {
            lift: Lift::Identity { dim: state_dim },
            transition: Matrix::identity(state_dim),
            input: Matrix::zeros(state_dim, action_dim),
        }
    }

    pub fn lift_dim(&self) -> usize {
        self.transition.rows()
    }

    pub fn state_dim(&self) -> usize {
        match &self.lift {
            Lift::Network(p) => p.input_dim(),
            Lift::Identity { dim } => *dim,
        }
    }

    pub fn action_dim(&self) -> usize {
        self.input.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.lift_dim();
        let out = match &self.lift {
            Lift::Network(p) => p.output_dim(),
            Lift::Identity { dim } => *dim,
        };
        if self.transition.cols() != m || self.input.rows() != m || out != m {
            return Err(dim_err!(
                "Koopman shapes: lift -> {}, A {:?}, B {:?}",
                out,
                self.transition.shape(),
                self.input.shape()
            ));
        }
        Ok(())
    }

    /// Same structure with every parameter zero, used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        Self {
            lift: match &self.lift {
                Lift::Network(p) => Lift::Network(p.zeros_like()),
                Lift::Identity { dim } => Lift::Identity { dim: *dim },
            },
            transition: Matrix::zeros(self.transition.rows(), self.transition.cols()),
            input: Matrix::zeros(self.input.rows(), self.input.cols()),
        }
    }

    fn lift_cached(&self, x: &Matrix) -> Result<(Matrix, Option<MlpCache>)> {
        if x.cols() != self.state_dim() {
            return Err(dim_err!("lift expects width {}, got {}", self.state_dim(), x.cols()));
        }
        match &self.lift {
            Lift::Network(p) => {
                let (z, c) = p.forward_batch(x)?;
                Ok((z, Some(c)))
            }
            Lift::Identity { .. } => Ok((x.clone(), None)),
        }
    }

    fn lift_backward(&self, cache: Option<&MlpCache>, dz: &Matrix, grads: &mut KoopmanModel) -> Result<()> {
        if let (Lift::Network(p), Some(c), Lift::Network(g)) = (&self.lift, cache, &mut grads.lift) {
            let (pg, _) = p.backward(c, dz)?;
            crate::numeric::axpy(g, 1.0, &pg);
        }
        Ok(())
    }

    /// `z = g(x)` for one state.
    pub fn lift(&self, x: &[f64]) -> Result<LatentState> {
        Ok(LatentState(self.lift_batch(&Matrix::row_vector(x))?.into_vec()))
    }

    pub fn lift_batch(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.lift_cached(x)?.0)
    }

    /// `z' = A z + B a`.
    pub fn predict(&self, z: &LatentState, a: &[f64]) -> Result<LatentState> {
        let out = self.predict_batch(&Matrix::row_vector(&z.0), &Matrix::row_vector(a))?;
        Ok(LatentState(out.into_vec()))
    }

    /// Row-wise `z' = A z + B a` over a batch.
    pub fn predict_batch(&self, z: &Matrix, u: &Matrix) -> Result<Matrix> {
        let m = self.lift_dim();
        if z.cols() != m || u.cols() != self.action_dim() || z.rows() != u.rows() {
            return Err(dim_err!(
                "predict with latent {:?}, action {:?} for m = {}, n = {}",
                z.shape(),
                u.shape(),
                m,
                self.action_dim()
            ));
        }
        let mut out = Matrix::zeros(z.rows(), m);
        gemm(1.0, z, false, &self.transition, true, 0.0, &mut out);
        gemm(1.0, u, false, &self.input, true, 1.0, &mut out);
        Ok(out)
    }

    /// Imagined next latent state `A g(x) + B a_base`.
    pub fn imagine_next(&self, x: &[f64], a_base: &[f64]) -> Result<LatentState> {
        let z = self.lift(x)?;
        self.predict(&z, a_base)
    }

    pub fn imagine_batch(&self, x: &Matrix, u: &Matrix) -> Result<(Matrix, ImagineCache)> {
        let (z, lift) = self.lift_cached(x)?;
        let out = self.predict_batch(&z, u)?;
        Ok((
            out,
            ImagineCache {
                lift,
                z,
                u: u.clone(),
            },
        ))
    }

    /// Parameter gradients given the gradient with respect to the imagined
    /// states.
    pub fn imagine_backward(&self, cache: &ImagineCache, d_out: &Matrix) -> Result<KoopmanModel> {
        if d_out.shape() != (cache.z.rows(), self.lift_dim()) {
            return Err(dim_err!("imagined-state gradient has shape {:?}", d_out.shape()));
        }
        let mut grads = self.zeros_like();
        gemm(1.0, d_out, true, &cache.z, false, 0.0, &mut grads.transition);
        gemm(1.0, d_out, true, &cache.u, false, 0.0, &mut grads.input);
        let mut dz = Matrix::zeros(d_out.rows(), self.lift_dim());
        gemm(1.0, d_out, false, &self.transition, false, 0.0, &mut dz);
        self.lift_backward(cache.lift.as_ref(), &dz, &mut grads)?;
        Ok(grads)
    }

    /// Mean over the batch of `||g(x') - (A g(x) + B a)||^2` and its gradient
    /// with respect to lift parameters, `A` and `B`.
    pub fn loss_batch(&self, x: &Matrix, u: &Matrix, x_next: &Matrix) -> Result<(f64, KoopmanModel)> {
        let n = x.rows();
        if x_next.shape() != x.shape() || u.rows() != n {
            return Err(dim_err!(
                "Koopman loss batch shapes {:?}, {:?}, {:?}",
                x.shape(),
                u.shape(),
                x_next.shape()
            ));
        }
        let (z, cache) = self.lift_cached(x)?;
        let (zn, cache_next) = self.lift_cached(x_next)?;
        let pred = self.predict_batch(&z, u)?;
        let resid = zn.sub(&pred)?;
        let inv_n = 1.0 / n.max(1) as f64;
        let loss = resid.data().iter().map(|r| r * r).sum::<f64>() * inv_n;
        // d loss / d pred = -2 r / n ; d loss / d z' = 2 r / n
        let mut grads = self.zeros_like();
        gemm(-2.0 * inv_n, &resid, true, &z, false, 0.0, &mut grads.transition);
        gemm(-2.0 * inv_n, &resid, true, u, false, 0.0, &mut grads.input);
        let mut dz = Matrix::zeros(n, self.lift_dim());
        gemm(-2.0 * inv_n, &resid, false, &self.transition, false, 0.0, &mut dz);
        self.lift_backward(cache.as_ref(), &dz, &mut grads)?;
        let dzn = resid.scale(2.0 * inv_n);
        self.lift_backward(cache_next.as_ref(), &dzn, &mut grads)?;
        Ok((loss, grads))
    }

    /// Prediction loss over tagged transitions.
    pub fn loss(&self, batch: &[Transition]) -> Result<(f64, KoopmanModel)> {
        let (x, u, xn) = stack_transitions(batch)?;
        self.loss_batch(&x, &u, &xn)
    }
}

impl Parameters for KoopmanModel {
    fn slices(&self) -> Vec<&[f64]> {
        let mut out = match &self.lift {
            Lift::Network(p) => p.slices(),
            Lift::Identity { .. } => Vec::new(),
        };
        out.push(self.transition.data());
        out.push(self.input.data());
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = match &mut self.lift {
            Lift::Network(p) => p.slices_mut(),
            Lift::Identity { .. } => Vec::new(),
        };
        out.push(self.transition.data_mut());
        out.push(self.input.data_mut());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::gradcheck::{grad_check, GradCheckConfig};
    use crate::numeric::{flatten, unflatten_into};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn transition(state: Vec<f64>, episode: u64, next_episode: u64) -> Transition {
        Transition {
            next_state: state.clone(),
            state,
            action: vec![0.0],
            episode,
            next_episode,
        }
    }

    #[test]
    fn identity_lift_returns_the_state() {
        let model = KoopmanModel::identity_lift(3, 1);
        assert_eq!(model.lift(&[1.0, -2.0, 0.5]).unwrap().0, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn lift_is_deterministic_and_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = KoopmanModel::new(11, 3, 64, &[256, 256], &mut rng);
        let x: Vec<f64> = (0..11).map(|i| i as f64 * 0.1).collect();
        let z = model.lift(&x).unwrap();
        assert_eq!(z, model.lift(&x).unwrap());
        assert_eq!(z.0.len(), 64);
        assert!(z.0.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn default_operator_is_latent_persistence() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = KoopmanModel::new(4, 2, 6, &[8], &mut rng);
        let z = LatentState(vec![0.3, -1.0, 2.0, 0.0, 5.0, 1.5]);
        assert_eq!(model.predict(&z, &[7.0, -3.0]).unwrap(), z);
    }

    #[test]
    fn wrong_latent_width_is_dimension_error() {
        let model = KoopmanModel::identity_lift(3, 1);
        assert!(matches!(
            model.predict(&LatentState(vec![0.0; 4]), &[0.0]),
            Err(crate::KorrError::Dimension(_))
        ));
    }

    #[test]
    fn imagination_equals_lift_then_predict_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = KoopmanModel::new(4, 2, 6, &[8], &mut rng);
        model.transition = random(6, 6, &mut rng);
        model.input = random(6, 2, &mut rng);
        let x = [0.1, 0.4, -0.3, 0.9];
        let a = [0.2, -0.7];
        let direct = model.imagine_next(&x, &a).unwrap();
        let staged = model.predict(&model.lift(&x).unwrap(), &a).unwrap();
        assert_eq!(direct, staged);
        let zero_action = model.imagine_next(&x, &[0.0, 0.0]).unwrap();
        let az = model.transition.matvec(&model.lift(&x).unwrap().0).unwrap();
        for (p, q) in zero_action.0.iter().zip(&az) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn predictions_ignore_trajectory_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = KoopmanModel::new(3, 1, 5, &[8], &mut rng);
        let x = random(3, 3, &mut rng);
        let repeated = Matrix::from_rows(&[x.row(1), x.row(0), x.row(1), x.row(2), x.row(1)]).unwrap();
        let u = Matrix::from_rows(&[[0.4]; 5]).unwrap();
        let out = model.imagine_batch(&repeated, &u).unwrap().0;
        assert_eq!(out.row(0), out.row(2));
        assert_eq!(out.row(0), out.row(4));
    }

    #[test]
    fn zero_map_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = KoopmanModel::new(4, 2, 6, &[8], &mut rng);
        let mut collapsed = model.zeros_like();
        collapsed.transition = Matrix::zeros(6, 6);
        let (x, u, xn) = (random(5, 4, &mut rng), random(5, 2, &mut rng), random(5, 4, &mut rng));
        assert_eq!(collapsed.loss_batch(&x, &u, &xn).unwrap().0, 0.0);
    }

    #[test]
    fn fitted_linear_system_has_negligible_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Matrix::from_rows(&[[0.5, 0.2, 0.0], [0.1, 0.6, -0.2], [0.0, 0.3, 0.7]]).unwrap();
        let b = random(3, 2, &mut rng);
        let (x, u) = (random(50, 3, &mut rng), random(50, 2, &mut rng));
        let mut model = KoopmanModel::identity_lift(3, 2);
        model.transition = a;
        model.input = b;
        let xn = model.predict_batch(&x, &u).unwrap();
        let mut fitted = KoopmanModel::identity_lift(3, 2);
        fitted.fit_operator(&x, &u, &xn).unwrap();
        assert!(fitted.loss_batch(&x, &u, &xn).unwrap().0 < 1e-12);
    }

    #[test]
    fn cross_episode_pairs_are_rejected() {
        let model = KoopmanModel::identity_lift(2, 1);
        let ok = vec![transition(vec![0.0, 1.0], 3, 3)];
        assert!(model.loss(&ok).is_ok());
        let bad = vec![transition(vec![0.0, 1.0], 3, 3), transition(vec![1.0, 1.0], 3, 4)];
        assert!(matches!(model.loss(&bad), Err(crate::KorrError::Contract(_))));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut model = KoopmanModel::new(4, 2, 5, &[6], &mut rng);
            model.transition = random(5, 5, &mut rng);
            model.input = random(5, 2, &mut rng);
            let (x, u, xn) = (random(6, 4, &mut rng), random(6, 2, &mut rng), random(6, 4, &mut rng));
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

    #[test]
    fn imagination_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut model = KoopmanModel::new(3, 2, 4, &[5], &mut rng);
        model.transition = random(4, 4, &mut rng);
        model.input = random(4, 2, &mut rng);
        let (x, u) = (random(4, 3, &mut rng), random(4, 2, &mut rng));
        let weights = random(4, 4, &mut rng);
        let objective = |m: &KoopmanModel| {
            let out = m.imagine_batch(&x, &u).unwrap().0;
            out.data().iter().zip(weights.data()).map(|(o, w)| o * w).sum::<f64>()
        };
        let (_, cache) = model.imagine_batch(&x, &u).unwrap();
        let grads = model.imagine_backward(&cache, &weights).unwrap();
        let mut probe = model.clone();
        let report = grad_check(
            |p| {
                unflatten_into(&mut probe, p);
                objective(&probe)
            },
            &flatten(&model),
            &flatten(&grads),
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed, "{}", report.max_relative_error);
    }

    #[test]
    fn least_squares_operator_beats_nearby_operators() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut model = KoopmanModel::new(3, 1, 5, &[8], &mut rng);
        let (x, u, xn) = (random(40, 3, &mut rng), random(40, 1, &mut rng), random(40, 3, &mut rng));
        model.fit_operator(&x, &u, &xn).unwrap();
        let best = model.loss_batch(&x, &u, &xn).unwrap().0;
        for _ in 0..100 {
            let mut da = random(5, 5, &mut rng);
            let mut db = random(5, 1, &mut rng);
            let norm = (da.frobenius_norm().powi(2) + db.frobenius_norm().powi(2)).sqrt();
            da = da.scale(1e-3 / norm);
            db = db.scale(1e-3 / norm);
            let mut other = model.clone();
            other.transition = model.transition.add(&da).unwrap();
            other.input = model.input.add(&db).unwrap();
            assert!(best <= other.loss_batch(&x, &u, &xn).unwrap().0);
        }
    }

    proptest! {
        #[test]
        fn prediction_is_linear(
            seed in 0u64..1000,
            z1 in prop::collection::vec(-10.0f64..10.0, 4),
            z2 in prop::collection::vec(-10.0f64..10.0, 4),
            a1 in prop::collection::vec(-1.0f64..1.0, 2),
            a2 in prop::collection::vec(-1.0f64..1.0, 2),
            s in -3.0f64..3.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut model = KoopmanModel::identity_lift(4, 2);
            model.transition = random(4, 4, &mut rng);
            model.input = random(4, 2, &mut rng);
            let add = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x + y).collect::<Vec<_>>();
            let sum = model.predict(&LatentState(add(&z1, &z2)), &add(&a1, &a2)).unwrap();
            let p1 = model.predict(&LatentState(z1.clone()), &a1).unwrap();
            let p2 = model.predict(&LatentState(z2.clone()), &a2).unwrap();
            for i in 0..4 {
                prop_assert!((sum.0[i] - p1.0[i] - p2.0[i]).abs() < 1e-9);
            }
            let scaled_z: Vec<f64> = z1.iter().map(|v| v * s).collect();
            let scaled_a: Vec<f64> = a1.iter().map(|v| v * s).collect();
            let ps = model.predict(&LatentState(scaled_z), &scaled_a).unwrap();
            for i in 0..4 {
                prop_assert!((ps.0[i] - s * p1.0[i]).abs() < 1e-9);
            }
        }
    }
}
