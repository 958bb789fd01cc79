//! Open-loop multi-step prediction against recorded trajectories.

use serde::{Deserialize, Serialize};

use super::{KoopmanModel, NonlinearDynModel};
use crate::error::{contract_err, dim_err, Result};
use crate::numeric::Matrix;

/// Predictions of one open-loop rollout and their squared error per step.
///
/// `errors[k]` compares the prediction after `k + 1` steps with the recorded
/// ground truth, summed over dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenLoopRollout {
    pub predictions: Matrix,
    pub errors: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub mean: f64,
    pub std: f64,
}

fn check_horizon(states: &Matrix, actions: &Matrix, horizon: usize) -> Result<()> {
    if horizon == 0 || horizon > actions.rows() || states.rows() < horizon + 1 {
        return Err(contract_err!(
            "horizon {} exceeds trajectory of {} states and {} actions",
            horizon,
            states.rows(),
            actions.rows()
        ));
    }
    Ok(())
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Rolls `z_{k+1} = A z_k + B a_k` from `g(x_0)` and compares every step
/// with the lifted ground truth `g(x_k)`.
///
/// `states` holds `x_0 .. x_T` as rows, `actions` holds `a_0 .. a_{T-1}`.
pub fn koopman_rollout(model: &KoopmanModel, states: &Matrix, actions: &Matrix, horizon: usize) -> Result<OpenLoopRollout> {
    check_horizon(states, actions, horizon)?;
    let truth = model.lift_batch(states)?;
    let m = model.lift_dim();
    let mut predictions = Matrix::zeros(horizon, m);
    let mut errors = Vec::with_capacity(horizon);
    let mut z = Matrix::row_vector(truth.row(0));
    for k in 0..horizon {
        z = model.predict_batch(&z, &Matrix::row_vector(actions.row(k)))?;
        predictions.row_mut(k).copy_from_slice(z.row(0));
        errors.push(squared_distance(z.row(0), truth.row(k + 1)));
    }
    Ok(OpenLoopRollout { predictions, errors })
}

/// Feeds the network its own predictions and compares states directly.
pub fn nonlinear_rollout(
    model: &NonlinearDynModel,
    states: &Matrix,
    actions: &Matrix,
    horizon: usize,
) -> Result<OpenLoopRollout> {
    check_horizon(states, actions, horizon)?;
    let n = model.state_dim();
    if states.cols() != n {
        return Err(dim_err!("trajectory width {} for a {}-d model", states.cols(), n));
    }
    let mut predictions = Matrix::zeros(horizon, n);
    let mut errors = Vec::with_capacity(horizon);
    let mut x = Matrix::row_vector(states.row(0));
    for k in 0..horizon {
        x = model.predict_batch(&x, &Matrix::row_vector(actions.row(k)))?;
        predictions.row_mut(k).copy_from_slice(x.row(0));
        errors.push(squared_distance(x.row(0), states.row(k + 1)));
    }
    Ok(OpenLoopRollout { predictions, errors })
}

/// Per-step mean and population standard deviation across rollouts.
pub fn aggregate_curves(rollouts: &[OpenLoopRollout]) -> Result<Vec<CurvePoint>> {
    let Some(first) = rollouts.first() else {
        return Ok(Vec::new());
    };
    let horizon = first.errors.len();
    if rollouts.iter().any(|r| r.errors.len() != horizon) {
        return Err(dim_err!("rollouts of different horizons cannot be aggregated"));
    }
    let count = rollouts.len() as f64;
    Ok((0..horizon)
        .map(|k| {
            let mean = rollouts.iter().map(|r| r.errors[k]).sum::<f64>() / count;
            let var = rollouts.iter().map(|r| (r.errors[k] - mean).powi(2)).sum::<f64>() / count;
            CurvePoint {
                step: k + 1,
                mean,
                std: var.sqrt(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::gemm;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn linear_trajectory(a: &Matrix, b: &Matrix, steps: usize, rng: &mut ChaCha8Rng) -> (Matrix, Matrix) {
        let n = a.rows();
        let mut states = Matrix::zeros(steps + 1, n);
        let actions = Matrix::from_vec(steps, b.cols(), (0..steps * b.cols()).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        for i in 0..n {
            states.set(0, i, rng.gen_range(-1.0..1.0));
        }
        for t in 0..steps {
            let mut next = Matrix::zeros(1, n);
            gemm(1.0, &Matrix::row_vector(states.row(t)), false, a, true, 0.0, &mut next);
            gemm(1.0, &Matrix::row_vector(actions.row(t)), false, b, true, 1.0, &mut next);
            states.row_mut(t + 1).copy_from_slice(next.row(0));
        }
        (states, actions)
    }

    #[test]
    fn exact_linear_model_has_zero_error_at_every_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Matrix::from_rows(&[[0.8, 0.2], [-0.1, 0.9]]).unwrap();
        let b = Matrix::from_rows(&[[1.0], [0.0]]).unwrap();
        let (states, actions) = linear_trajectory(&a, &b, 30, &mut rng);
        let mut model = KoopmanModel::identity_lift(2, 1);
        model.transition = a;
        model.input = b;
        let r = koopman_rollout(&model, &states, &actions, 30).unwrap();
        assert!(r.errors.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn horizon_one_equals_single_sample_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = KoopmanModel::new(3, 1, 5, &[8], &mut rng);
        let states = Matrix::from_rows(&[[0.1, 0.2, 0.3], [0.3, -0.1, 0.0]]).unwrap();
        let actions = Matrix::from_rows(&[[0.5]]).unwrap();
        let r = koopman_rollout(&model, &states, &actions, 1).unwrap();
        let (loss, _) = model
            .loss_batch(
                &Matrix::row_vector(states.row(0)),
                &actions,
                &Matrix::row_vector(states.row(1)),
            )
            .unwrap();
        assert!((r.errors[0] - loss).abs() < 1e-12);
    }

    #[test]
    fn horizon_beyond_trajectory_is_contract_error() {
        let model = KoopmanModel::identity_lift(2, 1);
        let states = Matrix::zeros(4, 2);
        let actions = Matrix::zeros(3, 1);
        assert!(matches!(
            koopman_rollout(&model, &states, &actions, 4),
            Err(crate::KorrError::Contract(_))
        ));
    }

    #[test]
    fn aggregation_reports_mean_and_std() {
        let mk = |e: Vec<f64>| OpenLoopRollout {
            predictions: Matrix::zeros(e.len(), 1),
            errors: e,
        };
        let curve = aggregate_curves(&[mk(vec![1.0, 2.0]), mk(vec![3.0, 2.0])]).unwrap();
        assert_eq!(curve[0], CurvePoint { step: 1, mean: 2.0, std: 1.0 });
        assert_eq!(curve[1], CurvePoint { step: 2, mean: 2.0, std: 0.0 });
        assert!(aggregate_curves(&[]).unwrap().is_empty());
    }
}
