//! Data collection and fitting for the open-loop drift comparison between a
//! Koopman model and an unconstrained next-state network.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::base::{BasePolicy, ChunkSlot};
use crate::dynamics::{mean_row_norm, KoopmanModel, NonlinearDynModel};
use crate::env::{EnvConfig, PegInsertEnv, RandomnessLevel, ACTION_BOUNDS, ACTION_DIM, STATE_DIM};
use crate::error::{config_err, contract_err, Result};
use crate::eval::{drift_study, DriftReport, Trajectory};
use crate::numeric::{Adam, AdamConfig, Matrix};
use crate::residual::compose;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftConfig {
    pub level: RandomnessLevel,
    pub train_episodes: usize,
    pub heldout_rollouts: usize,
    pub horizon: usize,
    /// Exploration noise added to the base action, in units of the action
    /// bounds.
    pub action_noise: f64,
    pub lift_dim: usize,
    pub lift_hidden: Vec<usize>,
    pub nonlinear_depth: usize,
    pub nonlinear_width: usize,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self {
            level: RandomnessLevel::Med,
            train_episodes: 60,
            heldout_rollouts: 10,
            horizon: 50,
            action_noise: 0.3,
            lift_dim: 64,
            lift_hidden: vec![128, 128],
            nonlinear_depth: 2,
            nonlinear_width: 128,
            epochs: 30,
            minibatch_size: 256,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl DriftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.heldout_rollouts == 0 || self.train_episodes == 0 {
            return Err(config_err!("drift.horizon, drift.heldout_rollouts and drift.train_episodes must be positive"));
        }
        if self.action_noise < 0.0 || self.lr <= 0.0 || self.minibatch_size == 0 {
            return Err(config_err!("drift.action_noise must be non-negative, drift.lr and drift.minibatch_size positive"));
        }
        Ok(())
    }
}

/// Runs the base policy with Gaussian action noise and records normalized
/// states and executed actions. Episodes shorter than `min_len` steps are
/// skipped; seeds are tried in order from `first_seed`.
pub fn collect_trajectories(
    env: &EnvConfig,
    base: &BasePolicy,
    count: usize,
    first_seed: u64,
    action_noise: f64,
    min_len: usize,
) -> Result<(Vec<Trajectory>, u64)> {
    let normal = Normal::new(0.0, action_noise.max(0.0)).map_err(|e| config_err!("action noise: {e}"))?;
    let mut out = Vec::with_capacity(count);
    let mut seed = first_seed;
    let limit = first_seed + 50 * count.max(1) as u64;
    while out.len() < count {
        if seed >= limit {
            return Err(contract_err!(
                "only {} of {} episodes reached {} steps",
                out.len(),
                count,
                min_len
            ));
        }
        let mut e = PegInsertEnv::new(*env, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(3);
        seed += 1;
        let mut slot = ChunkSlot::default();
        let mut obs = *e.state();
        let mut states = vec![base.normalizer.apply(&obs.to_array())];
        let mut actions = Vec::new();
        loop {
            if slot.needs_replan() {
                slot.install(base.chunk(&obs));
            }
            let a_base = slot.next_action();
            let noise: Vec<f64> = (0..ACTION_DIM).map(|d| normal.sample(&mut rng) * ACTION_BOUNDS[d]).collect();
            let a = compose(&a_base, &noise, 1.0);
            let step = e.step(&a)?;
            actions.push(a.normalized().to_vec());
            obs = step.next_state;
            states.push(base.normalizer.apply(&obs.to_array()));
            if step.done {
                break;
            }
        }
        if actions.len() >= min_len {
            out.push(Trajectory {
                states: Matrix::from_rows(&states)?,
                actions: Matrix::from_rows(&actions)?,
            });
        }
    }
    Ok((out, seed))
}

fn stack(trajectories: &[Trajectory]) -> Result<(Matrix, Matrix, Matrix)> {
    let mut x = Vec::new();
    let mut u = Vec::new();
    let mut xn = Vec::new();
    for t in trajectories {
        for k in 0..t.actions.rows() {
            x.push(t.states.row(k).to_vec());
            u.push(t.actions.row(k).to_vec());
            xn.push(t.states.row(k + 1).to_vec());
        }
    }
    Ok((Matrix::from_rows(&x)?, Matrix::from_rows(&u)?, Matrix::from_rows(&xn)?))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriftOutcome {
    pub report: DriftReport,
    pub transitions: usize,
    pub koopman_final_loss: f64,
    pub nonlinear_final_loss: f64,
    /// Mean latent norm over the training states after fitting.
    pub latent_norm_mean: f64,
    /// Final-step means divided by the mean squared norm of the quantity
    /// each model is compared on (lifted or raw held-out states).
    pub koopman_final_relative: f64,
    pub nonlinear_final_relative: f64,
}

fn mean_sq_norm(m: &Matrix) -> f64 {
    let n = m.rows().max(1) as f64;
    m.data().iter().map(|v| v * v).sum::<f64>() / n
}

/// Fits both models on the same shuffled minibatches of the training
/// episodes, then rolls them out open-loop on held-out episodes.
pub fn run_drift(env: &EnvConfig, base: &BasePolicy, config: &DriftConfig) -> Result<(DriftOutcome, KoopmanModel, NonlinearDynModel)> {
    config.validate()?;
    let env = EnvConfig {
        randomness_level: config.level,
        disturb_enabled: false,
        ..*env
    };
    let (train, next_seed) = collect_trajectories(&env, base, config.train_episodes, config.seed, config.action_noise, 1)?;
    let (heldout, _) = collect_trajectories(
        &env,
        base,
        config.heldout_rollouts,
        next_seed,
        config.action_noise,
        config.horizon,
    )?;
    let (x, u, xn) = stack(&train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut koopman = KoopmanModel::new(STATE_DIM, ACTION_DIM, config.lift_dim, &config.lift_hidden, &mut rng);
    let mut nonlinear = NonlinearDynModel::new(STATE_DIM, ACTION_DIM, config.nonlinear_depth, config.nonlinear_width, &mut rng);
    let mut k_opt = Adam::new(AdamConfig::with_lr(config.lr));
    let mut n_opt = Adam::new(AdamConfig::with_lr(config.lr));
    let mut order: Vec<usize> = (0..x.rows()).collect();
    let (mut k_loss, mut n_loss) = (f64::NAN, f64::NAN);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut ks, mut ns, mut batches) = (0.0, 0.0, 0usize);
        for idx in order.chunks(config.minibatch_size) {
            let (bx, bu, bn) = (x.select_rows(idx), u.select_rows(idx), xn.select_rows(idx));
            let (l, g) = koopman.loss_batch(&bx, &bu, &bn)?;
            k_opt.step(&mut koopman, &g)?;
            ks += l;
            let (l, g) = nonlinear.loss_batch(&bx, &bu, &bn)?;
            n_opt.step(&mut nonlinear, &g)?;
            ns += l;
            batches += 1;
        }
        k_loss = ks / batches as f64;
        n_loss = ns / batches as f64;
    }
    let latent_norm_mean = mean_row_norm(&koopman.lift_batch(&x)?);
    crate::dynamics::flag_collapse(latent_norm_mean);
    let report = drift_study(&koopman, &nonlinear, &heldout, config.horizon)?;
    let (mut lifted_sq, mut raw_sq) = (0.0, 0.0);
    for t in &heldout {
        lifted_sq += mean_sq_norm(&koopman.lift_batch(&t.states)?) / heldout.len() as f64;
        raw_sq += mean_sq_norm(&t.states) / heldout.len() as f64;
    }
    let last = config.horizon - 1;
    let koopman_final_relative = report.koopman[last].mean / lifted_sq.max(f64::MIN_POSITIVE);
    let nonlinear_final_relative = report.nonlinear[last].mean / raw_sq.max(f64::MIN_POSITIVE);
    Ok((
        DriftOutcome {
            report,
            transitions: x.rows(),
            koopman_final_loss: k_loss,
            nonlinear_final_loss: n_loss,
            latent_norm_mean,
            koopman_final_relative,
            nonlinear_final_relative,
        },
        koopman,
        nonlinear,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ppo::tests::tiny_base;

    #[test]
    fn trajectories_meet_the_length_floor() {
        let base = tiny_base();
        let env = EnvConfig::default();
        let (t, next) = collect_trajectories(&env, &base, 3, 7, 0.3, 20).unwrap();
        assert_eq!(t.len(), 3);
        assert!(next >= 10);
        for tr in &t {
            assert!(tr.actions.rows() >= 20);
            assert_eq!(tr.states.rows(), tr.actions.rows() + 1);
            assert_eq!(tr.states.cols(), STATE_DIM);
            assert!(tr.actions.data().iter().all(|a| a.abs() <= 1.0 + 1e-12));
        }
    }

    #[test]
    fn small_study_runs_and_repeats() {
        let base = tiny_base();
        let cfg = DriftConfig {
            train_episodes: 3,
            heldout_rollouts: 2,
            horizon: 5,
            lift_dim: 8,
            lift_hidden: vec![16],
            nonlinear_width: 16,
            epochs: 2,
            ..DriftConfig::default()
        };
        let (a, _, _) = run_drift(&EnvConfig::default(), &base, &cfg).unwrap();
        let (b, _, _) = run_drift(&EnvConfig::default(), &base, &cfg).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.report.koopman.len(), 5);
        assert_eq!(a.report.koopman_final.len(), 2);
        assert!(a.koopman_final_loss.is_finite() && a.nonlinear_final_loss.is_finite());
    }
}
