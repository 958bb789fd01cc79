//! Residual training: rollout collection, advantage estimation, the clipped
//! policy objective and joint dynamics updates.

mod buffer;
mod gae;
mod losses;
mod train;
mod update;

use serde::{Deserialize, Serialize};

pub use buffer::{collect_rollouts, RolloutBuffer, VecEnv};
pub use gae::{compute_gae, normalize_advantages};
pub use losses::{gaussian_kl, ppo_losses, ratios, LossCoefficients, LossGrads, LossTargets, LossTerms};
pub use train::{edmd_warm_start, train, IterationMetrics, TimingRecord, TrainOutcome, TrainSetup, TrainSinks};
pub use update::{update, Optimizers, UpdateMetrics};

use crate::error::{config_err, Result};

/// How the dynamics prediction loss and the policy loss are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DynamicsStep {
    /// A dynamics step on the prediction loss, then the policy step.
    Separate,
    /// One dynamics step on the summed gradients of both losses.
    Combined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip_eps: f64,
    /// Value-loss weight.
    pub c1: f64,
    /// Entropy-bonus weight.
    pub c2: f64,
    pub epochs_per_iter: usize,
    pub minibatch_size: usize,
    pub num_envs: usize,
    pub steps_per_env: usize,
    pub iterations: usize,
    /// Let policy-loss gradients reach the lift and the latent operator.
    pub bkp_rl_to_koopman: bool,
    pub koopman_loss_weight: f64,
    pub dynamics_step: DynamicsStep,
    pub policy_lr: f64,
    pub dynamics_lr: f64,
    /// Global gradient-norm clip for the policy step; 0 disables it.
    pub max_grad_norm: f64,
    /// Deterministic evaluation cadence in iterations; 0 evaluates only at
    /// the start and the end.
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// First episode seed of the checkpoint-selection evaluations.
    pub eval_seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            clip_eps: 0.2,
            c1: 0.5,
            c2: 0.01,
            epochs_per_iter: 4,
            minibatch_size: 1024,
            num_envs: 64,
            steps_per_env: 400,
            iterations: 50,
            bkp_rl_to_koopman: true,
            koopman_loss_weight: 1.0,
            dynamics_step: DynamicsStep::Separate,
            policy_lr: 3e-4,
            dynamics_lr: 1e-4,
            max_grad_norm: 1.0,
            eval_every: 10,
            eval_episodes: 128,
            eval_seed: 1_000_000,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(config_err!("ppo.gamma must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(config_err!("ppo.lambda must lie in [0, 1]"));
        }
        if !(self.clip_eps > 0.0) {
            return Err(config_err!("ppo.clip_eps must be positive"));
        }
        if self.num_envs == 0 || self.steps_per_env == 0 || self.minibatch_size == 0 || self.epochs_per_iter == 0 {
            return Err(config_err!(
                "ppo.num_envs, ppo.steps_per_env, ppo.minibatch_size and ppo.epochs_per_iter must be positive"
            ));
        }
        if !(self.policy_lr > 0.0 && self.dynamics_lr > 0.0) {
            return Err(config_err!("ppo learning rates must be positive"));
        }
        if self.c1 < 0.0 || self.c2 < 0.0 || self.koopman_loss_weight < 0.0 || self.max_grad_norm < 0.0 {
            return Err(config_err!("ppo loss weights and max_grad_norm must be non-negative"));
        }
        if self.eval_episodes == 0 {
            return Err(config_err!("ppo.eval_episodes must be positive"));
        }
        Ok(())
    }

    pub fn coefficients(&self) -> LossCoefficients {
        LossCoefficients {
            clip_eps: self.clip_eps,
            c1: self.c1,
            c2: self.c2,
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::base::{collect_demos, train_bc, BasePolicy, BasePolicyConfig};
    use crate::dynamics::{DynamicsModel, KoopmanModel};
    use crate::env::{EnvConfig, ACTION_DIM, STATE_DIM};
    use crate::eval::{evaluate, EvalSpec, PolicyStack};
    use crate::numeric::gradcheck::{grad_check, GradCheckConfig};
    use crate::numeric::{flatten, unflatten_into, Matrix};
    use crate::residual::{gaussian_log_prob, ResidualConfig, ResidualMode, ResidualPolicy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_base() -> BasePolicy {
        let env = EnvConfig::default();
        let data = collect_demos(&env, 0, 4, 16).unwrap();
        let cfg = BasePolicyConfig {
            hidden: vec![16],
            epochs: 2,
            ..BasePolicyConfig::default()
        };
        train_bc(&data, &cfg).unwrap().0
    }

    pub(crate) fn tiny_policy(base: &BasePolicy, mode: ResidualMode) -> ResidualPolicy {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dynamics = match mode {
            ResidualMode::Korr => Some(DynamicsModel::Koopman(KoopmanModel::new(
                STATE_DIM, ACTION_DIM, 12, &[16], &mut rng,
            ))),
            ResidualMode::ResipNonlinDyn => Some(DynamicsModel::Nonlinear(crate::dynamics::NonlinearDynModel::new(
                STATE_DIM, ACTION_DIM, 2, 16, &mut rng,
            ))),
            ResidualMode::Resip => None,
        };
        let cfg = ResidualConfig {
            mode,
            hidden: vec![16, 16],
            ..ResidualConfig::default()
        };
        ResidualPolicy::new(cfg, base.normalizer.clone(), dynamics, &mut rng).unwrap()
    }

    fn small_ppo() -> PpoConfig {
        PpoConfig {
            num_envs: 2,
            steps_per_env: 16,
            minibatch_size: 8,
            iterations: 2,
            eval_every: 1,
            eval_episodes: 4,
            ..PpoConfig::default()
        }
    }

    #[test]
    fn one_env_five_steps_gives_five_records() {
        let base = tiny_base();
        let policy = tiny_policy(&base, ResidualMode::Korr);
        let mut venv = VecEnv::new(EnvConfig::default(), 1, 0);
        let buf = collect_rollouts(&mut venv, &base, &policy, 5, None).unwrap();
        assert_eq!(buf.len(), 5);
        assert_eq!(buf.inputs.states.rows(), 5);
    }

    #[test]
    fn collection_is_bit_reproducible() {
        let base = tiny_base();
        let policy = tiny_policy(&base, ResidualMode::Korr);
        let run = || {
            let mut venv = VecEnv::new(EnvConfig::default(), 3, 9);
            collect_rollouts(&mut venv, &base, &policy, 40, None).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.residuals, b.residuals);
        assert_eq!(a.next_states, b.next_states);
        assert_eq!(a.rewards, b.rewards);
        assert_eq!(a.logp_old, b.logp_old);
    }

    #[test]
    fn successors_stay_within_their_episode() {
        let base = tiny_base();
        let policy = tiny_policy(&base, ResidualMode::Resip);
        let mut venv = VecEnv::new(EnvConfig::default(), 2, 1);
        let buf = collect_rollouts(&mut venv, &base, &policy, 250, None).unwrap();
        assert!(buf.dones.iter().any(|&d| d));
        for t in 0..buf.steps - 1 {
            for e in 0..2 {
                let (i, j) = (t * 2 + e, (t + 1) * 2 + e);
                if buf.dones[i] {
                    assert_ne!(buf.episode[i], buf.episode[j]);
                } else {
                    assert_eq!(buf.episode[i], buf.episode[j]);
                    assert_eq!(buf.next_states.row(i), buf.inputs.states.row(j));
                }
            }
        }
    }

    #[test]
    fn zero_residual_noise_is_bounded_by_scale_and_six_sigma() {
        let base = tiny_base();
        let policy = tiny_policy(&base, ResidualMode::Korr);
        let mut venv = VecEnv::new(EnvConfig::default(), 4, 2);
        let buf = collect_rollouts(&mut venv, &base, &policy, 50, None).unwrap();
        let bound = policy.config.action_scale * 6.0 * (-1.0f64).exp();
        for i in 0..buf.len() {
            for j in 0..ACTION_DIM {
                let diff = (buf.executed.get(i, j) - buf.inputs.base_actions.get(i, j)).abs();
                // both are in bound-normalized units, as is the residual
                assert!(diff <= bound + 1e-12, "{diff} > {bound}");
            }
        }
    }

    /// Smallest |pre-activation| of actor and critic; central differences
    /// are meaningless when a step straddles a ReLU kink.
    fn kink_margin(p: &ResidualPolicy, inputs: &crate::residual::PolicyInputs) -> f64 {
        let cond = p.forward(inputs).unwrap().cond;
        let a = p.nets.actor.forward_batch(&cond).unwrap().1.min_abs_preactivation();
        let c = p.nets.critic.forward_batch(&cond).unwrap().1.min_abs_preactivation();
        a.min(c)
    }

    #[test]
    fn ppo_gradient_matches_finite_differences_inside_clip_region() {
        let base = tiny_base();
        let mut checked = 0;
        for seed in 0..50 {
            if checked == 5 {
                break;
            }
            let mut policy = tiny_policy(&base, ResidualMode::Resip);
            policy.config.learn_std = true;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            policy.nets.actor = crate::numeric::MlpParams::new(
                policy.nets.actor.layer_sizes(),
                crate::numeric::Activation::Relu,
                &mut rng,
            )
            .without_output_bias();
            let mut venv = VecEnv::new(EnvConfig::default(), 2, seed);
            let mut buf = collect_rollouts(&mut venv, &base, &policy, 6, None).unwrap();
            if kink_margin(&policy, &buf.inputs) < 1e-4 {
                continue;
            }
            buf.finalize(0.99, 0.95).unwrap();
            let adv = normalize_advantages(buf.advantages.as_ref().unwrap());
            let ret = buf.returns.clone().unwrap();
            let cfg = PpoConfig::default().coefficients();
            let objective = |p: &ResidualPolicy| {
                let fwd = p.forward(&buf.inputs).unwrap();
                let t = LossTargets {
                    actions: &buf.residuals,
                    logp_old: &buf.logp_old,
                    advantages: &adv,
                    returns: &ret,
                };
                let (terms, grads) = ppo_losses(&fwd.mean, &fwd.value, &p.nets.logstd, &t, &cfg).unwrap();
                (terms, grads, fwd)
            };
            let (terms, grads, fwd) = objective(&policy);
            assert_eq!(terms.clip_fraction, 0.0);
            let (analytic, _) = policy
                .backward(&fwd, &grads.d_mean, &grads.d_logstd, &grads.d_value, false)
                .unwrap();
            let mut probe = policy.clone();
            let report = grad_check(
                |p| {
                    unflatten_into(&mut probe.nets, p);
                    -objective(&probe).0.objective
                },
                &flatten(&policy.nets),
                &flatten(&analytic),
                &GradCheckConfig::default(),
            )
            .unwrap();
            assert!(report.passed, "seed {seed}: {}", report.max_relative_error);
            checked += 1;
        }
        assert_eq!(checked, 5);
    }

    #[test]
    fn without_backpropagation_policy_loss_leaves_dynamics_untouched() {
        let base = tiny_base();
        let mut venv = VecEnv::new(EnvConfig::default(), 2, 3);
        let policy = tiny_policy(&base, ResidualMode::Korr);
        let mut buf = collect_rollouts(&mut venv, &base, &policy, 16, None).unwrap();
        buf.finalize(0.99, 0.95).unwrap();
        for bkp in [false, true] {
            let cfg = PpoConfig {
                bkp_rl_to_koopman: bkp,
                koopman_loss_weight: 0.0,
                minibatch_size: 8,
                ..PpoConfig::default()
            };
            let mut p = policy.clone();
            let mut opt = Optimizers::new(&cfg);
            update(&buf, &mut p, &mut opt, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let unchanged = flatten(p.dynamics.as_ref().unwrap()) == flatten(policy.dynamics.as_ref().unwrap());
            assert_eq!(unchanged, !bkp);
            assert_ne!(flatten(&p.nets), flatten(&policy.nets));
        }
    }

    #[test]
    fn update_on_identical_transitions_reduces_both_losses() {
        let base = tiny_base();
        let policy = tiny_policy(&base, ResidualMode::Korr);
        let mut venv = VecEnv::new(EnvConfig::default(), 1, 4);
        let mut buf = collect_rollouts(&mut venv, &base, &policy, 1, None).unwrap();
        let rep = |m: &Matrix| Matrix::from_rows(&vec![m.row(0); 32]).unwrap();
        buf.inputs.states = rep(&buf.inputs.states);
        buf.inputs.base_actions = rep(&buf.inputs.base_actions);
        buf.inputs.goals = Matrix::zeros(32, 0);
        buf.residuals = rep(&buf.residuals);
        buf.means_old = rep(&buf.means_old);
        buf.executed = rep(&buf.executed);
        buf.next_states = rep(&buf.next_states);
        buf.logp_old = vec![buf.logp_old[0]; 32];
        buf.values_old = vec![buf.values_old[0]; 32];
        buf.rewards = vec![1.0; 32];
        buf.dones = vec![true; 32];
        buf.episode = vec![0; 32];
        buf.num_envs = 32;
        buf.last_values = vec![0.0; 32];
        buf.finalize(0.99, 0.95).unwrap();
        let cfg = PpoConfig {
            minibatch_size: 32,
            epochs_per_iter: 1,
            ..PpoConfig::default()
        };
        let losses = |p: &ResidualPolicy| {
            let d = p.dynamics.as_ref().unwrap();
            let kpm = d.loss_batch(&buf.inputs.states, &buf.executed, &buf.next_states).unwrap().0;
            let fwd = p.forward(&buf.inputs).unwrap();
            let ret = buf.returns.as_ref().unwrap();
            let vf: f64 = fwd.value.iter().zip(ret).map(|(v, r)| (v - r).powi(2)).sum::<f64>() / 32.0;
            (kpm, vf)
        };
        let before = losses(&policy);
        let mut p = policy.clone();
        let mut opt = Optimizers::new(&cfg);
        update(&buf, &mut p, &mut opt, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let after = losses(&p);
        assert!(after.0 < before.0 && after.1 < before.1, "{before:?} -> {after:?}");
    }

    #[test]
    fn identical_policy_ratios_are_exactly_one_on_a_buffer() {
        let base = tiny_base();
        let policy = tiny_policy(&base, ResidualMode::Korr);
        let mut venv = VecEnv::new(EnvConfig::default(), 4, 6);
        let buf = collect_rollouts(&mut venv, &base, &policy, 8, None).unwrap();
        let fwd = policy.forward(&buf.inputs).unwrap();
        for i in 0..buf.len() {
            let lp = gaussian_log_prob(buf.residuals.row(i), fwd.mean.row(i), &policy.nets.logstd);
            assert_eq!((lp - buf.logp_old[i]).exp(), 1.0);
        }
    }

    #[test]
    fn smoke_training_is_fast_deterministic_and_keeps_base_frozen() {
        let base = tiny_base();
        let checksum = base.checksum();
        let setup = TrainSetup {
            env: EnvConfig::default(),
            base: &base,
            ppo: small_ppo(),
            selection: EvalSpec::default(),
            seed: 3,
        };
        let run = || {
            let mut log = Vec::new();
            let t0 = std::time::Instant::now();
            let out = {
                let mut sinks = TrainSinks {
                    metrics: Some(&mut log),
                    ..TrainSinks::default()
                };
                train(&setup, tiny_policy(&base, ResidualMode::Korr), &mut sinks).unwrap()
            };
            assert!(t0.elapsed().as_secs() < 60);
            (out, log)
        };
        let (out, log_a) = run();
        let (_, log_b) = run();
        assert_eq!(log_a, log_b);
        assert_eq!(out.history.len(), 2);
        assert!(out.history.iter().all(|m| m.kl < 0.05));
        assert_eq!(base.checksum(), checksum);
    }

    #[test]
    fn warm_start_lowers_the_prediction_loss() {
        let base = tiny_base();
        let mut policy = tiny_policy(&base, ResidualMode::Korr);
        let setup = TrainSetup {
            env: EnvConfig::default(),
            base: &base,
            ppo: PpoConfig {
                num_envs: 4,
                steps_per_env: 64,
                ..small_ppo()
            },
            selection: EvalSpec::default(),
            seed: 1,
        };
        let mut venv = VecEnv::new(setup.env, 4, 99);
        let buffer = collect_rollouts(&mut venv, &base, &policy, 64, None).unwrap();
        let loss = |p: &ResidualPolicy| {
            p.dynamics
                .as_ref()
                .unwrap()
                .loss_batch(&buffer.inputs.states, &buffer.executed, &buffer.next_states)
                .unwrap()
                .0
        };
        let before = loss(&policy);
        edmd_warm_start(&setup, &mut policy).unwrap();
        assert!(loss(&policy) < before, "{} vs {before}", loss(&policy));
        let mut resip = tiny_policy(&base, ResidualMode::Resip);
        let copy = resip.clone();
        edmd_warm_start(&setup, &mut resip).unwrap();
        assert_eq!(resip, copy);
    }

    #[test]
    fn zero_iterations_return_the_initialization() {
        let base = tiny_base();
        let init = tiny_policy(&base, ResidualMode::Korr);
        let setup = TrainSetup {
            env: EnvConfig::default(),
            base: &base,
            ppo: PpoConfig {
                iterations: 0,
                eval_episodes: 8,
                ..small_ppo()
            },
            selection: EvalSpec::default(),
            seed: 0,
        };
        let out = train(&setup, init.clone(), &mut TrainSinks::default()).unwrap();
        assert_eq!(out.final_policy, init);
        let spec = EvalSpec {
            episodes: 16,
            ..EvalSpec::default()
        };
        let with_residual = evaluate(
            PolicyStack::Residual {
                base: &base,
                residual: &out.final_policy,
            },
            &EnvConfig::default(),
            &spec,
        )
        .unwrap();
        let frozen = evaluate(PolicyStack::Base(&base), &EnvConfig::default(), &spec).unwrap();
        assert_eq!(with_residual, frozen);
    }
}
