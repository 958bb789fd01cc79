//! One optimization phase over a finalized buffer.

use log::warn;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{gaussian_kl, normalize_advantages, ppo_losses, DynamicsStep, LossTargets, PpoConfig, RolloutBuffer};
use crate::dynamics::{mean_row_norm, DynamicsModel};
use crate::error::{contract_err, Result};
use crate::numeric::{all_finite, axpy, global_norm, scale_params, Adam, AdamConfig, Parameters};
use crate::residual::{ActorCritic, ResidualPolicy};

/// Optimizer state carried across iterations.
#[derive(Debug, Clone)]
pub struct Optimizers {
    pub policy: Adam,
    /// Steps on the dynamics prediction loss.
    pub dynamics: Adam,
    /// Steps on policy-loss gradients reaching the dynamics model.
    pub dynamics_rl: Adam,
}

impl Optimizers {
    pub fn new(config: &PpoConfig) -> Self {
        Self {
            policy: Adam::new(AdamConfig::with_lr(config.policy_lr)),
            dynamics: Adam::new(AdamConfig::with_lr(config.dynamics_lr)),
            dynamics_rl: Adam::new(AdamConfig::with_lr(config.dynamics_lr)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub l_clip: f64,
    pub l_vf: f64,
    pub l_s: f64,
    pub l_kpm: Option<f64>,
    /// Exact mean `KL(old || new)` over the buffer after the update.
    pub kl: f64,
    pub clip_fraction: f64,
    pub latent_norm_mean: Option<f64>,
    /// The phase hit a non-finite loss and parameters were restored.
    pub aborted: bool,
}

fn clip_norm<P: Parameters>(grads: &mut P, extra: Option<&mut DynamicsModel>, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = match &extra {
        Some(d) => global_norm(&[&*grads, &**d]),
        None => global_norm(&[&*grads]),
    };
    if norm > max_norm {
        let s = max_norm / norm;
        scale_params(grads, s);
        if let Some(d) = extra {
            scale_params(d, s);
        }
    }
}

/// Epochs of shuffled minibatches. Each minibatch takes a dynamics step on
/// `(x, a_exe, x')` and then a policy step; with `bkp_rl_to_koopman` the
/// policy step also updates the dynamics model through the conditioning.
pub fn update(
    buffer: &RolloutBuffer,
    policy: &mut ResidualPolicy,
    opt: &mut Optimizers,
    config: &PpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateMetrics> {
    let (Some(advantages), Some(returns)) = (&buffer.advantages, &buffer.returns) else {
        return Err(contract_err!("update needs a finalized buffer"));
    };
    let snapshot = (policy.clone(), opt.clone());
    let coef = config.coefficients();
    let mut order: Vec<usize> = (0..buffer.len()).collect();
    let (mut sum_clip, mut sum_vf, mut sum_s, mut sum_kpm, mut sum_cf) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut batches = 0usize;
    let mut aborted = false;
    'epochs: for _ in 0..config.epochs_per_iter {
        order.shuffle(rng);
        for idx in order.chunks(config.minibatch_size) {
            let x = buffer.inputs.states.select_rows(idx);
            let u = buffer.executed.select_rows(idx);
            let xn = buffer.next_states.select_rows(idx);
            let mut kpm_grads = None;
            if let Some(model) = &policy.dynamics {
                let (l, mut g) = model.loss_batch(&x, &u, &xn)?;
                if !l.is_finite() || !all_finite(&g) {
                    aborted = true;
                    break 'epochs;
                }
                sum_kpm += l;
                scale_params(&mut g, config.koopman_loss_weight);
                match config.dynamics_step {
                    DynamicsStep::Separate => {
                        let model = policy.dynamics.as_mut().expect("checked above");
                        opt.dynamics.step(model, &g)?;
                    }
                    DynamicsStep::Combined => kpm_grads = Some(g),
                }
            }
            let inputs = buffer.inputs.select_rows(idx);
            let fwd = policy.forward(&inputs)?;
            let actions = buffer.residuals.select_rows(idx);
            let logp_old: Vec<f64> = idx.iter().map(|&i| buffer.logp_old[i]).collect();
            let adv = normalize_advantages(&idx.iter().map(|&i| advantages[i]).collect::<Vec<_>>());
            let ret: Vec<f64> = idx.iter().map(|&i| returns[i]).collect();
            let targets = LossTargets {
                actions: &actions,
                logp_old: &logp_old,
                advantages: &adv,
                returns: &ret,
            };
            let (terms, grads) = ppo_losses(&fwd.mean, &fwd.value, &policy.nets.logstd, &targets, &coef)?;
            if !terms.objective.is_finite() {
                aborted = true;
                break 'epochs;
            }
            let through = config.bkp_rl_to_koopman && policy.dynamics.is_some();
            let (mut net_grads, mut dyn_grads): (ActorCritic, Option<DynamicsModel>) =
                policy.backward(&fwd, &grads.d_mean, &grads.d_logstd, &grads.d_value, through)?;
            clip_norm(&mut net_grads, dyn_grads.as_mut(), config.max_grad_norm);
            if !all_finite(&net_grads) || dyn_grads.as_ref().is_some_and(|g| !all_finite(g)) {
                aborted = true;
                break 'epochs;
            }
            opt.policy.step(&mut policy.nets, &net_grads)?;
            if let Some(model) = policy.dynamics.as_mut() {
                match (kpm_grads, dyn_grads) {
                    (Some(mut k), Some(d)) => {
                        axpy(&mut k, 1.0, &d);
                        opt.dynamics.step(model, &k)?;
                    }
                    (Some(k), None) => opt.dynamics.step(model, &k)?,
                    (None, Some(d)) => opt.dynamics_rl.step(model, &d)?,
                    (None, None) => {}
                }
            }
            sum_clip += terms.clip;
            sum_vf += terms.value;
            sum_s += terms.entropy;
            sum_cf += terms.clip_fraction;
            batches += 1;
        }
    }
    if aborted {
        warn!("non-finite loss during update; restoring the pre-update parameters");
        *policy = snapshot.0;
        *opt = snapshot.1;
        return Ok(UpdateMetrics {
            aborted: true,
            ..UpdateMetrics::default()
        });
    }
    let fwd = policy.forward(&buffer.inputs)?;
    let kl = gaussian_kl(&buffer.means_old, &buffer.logstd_old, &fwd.mean, &policy.nets.logstd);
    let latent_norm_mean = match &policy.dynamics {
        Some(DynamicsModel::Koopman(m)) => Some(mean_row_norm(&m.lift_batch(&buffer.inputs.states)?)),
        _ => None,
    };
    let b = batches.max(1) as f64;
    Ok(UpdateMetrics {
        l_clip: sum_clip / b,
        l_vf: sum_vf / b,
        l_s: sum_s / b,
        l_kpm: policy.dynamics.as_ref().map(|_| sum_kpm / b),
        kl,
        clip_fraction: sum_cf / b,
        latent_norm_mean,
        aborted: false,
    })
}
