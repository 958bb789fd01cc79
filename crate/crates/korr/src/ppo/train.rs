//! Outer loop: collect, finalize, update, evaluate, keep the best policy.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{collect_rollouts, update, Optimizers, PpoConfig, VecEnv};
use crate::base::BasePolicy;
use crate::dynamics::DynamicsModel;
use crate::env::EnvConfig;
use crate::error::{contract_err, Result};
use crate::eval::{evaluate, EvalSpec, PolicyStack};
use crate::residual::ResidualPolicy;

/// Keeps the warm-start environments distinct from the training ones.
const WARM_START_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

pub struct TrainSetup<'a> {
    /// Training environment.
    pub env: EnvConfig,
    pub base: &'a BasePolicy,
    pub ppo: PpoConfig,
    /// Condition used by the checkpoint-selection evaluations; its episode
    /// count and seed come from the PPO config.
    pub selection: EvalSpec,
    pub seed: u64,
}

/// Where per-iteration records go. Wall-clock time is kept out of the
/// metrics stream so that stream is reproducible bit for bit.
#[derive(Default)]
pub struct TrainSinks<'w> {
    pub metrics: Option<&'w mut dyn Write>,
    pub timing: Option<&'w mut dyn Write>,
    pub dump_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub env_steps: usize,
    pub episodes_completed: usize,
    pub mean_episode_reward: Option<f64>,
    pub eval_success_rate: Option<f64>,
    pub l_clip: f64,
    pub l_vf: f64,
    pub l_s: f64,
    pub l_kpm: Option<f64>,
    pub kl: f64,
    pub clip_fraction: f64,
    pub latent_norm_mean: Option<f64>,
    pub aborted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub iteration: usize,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_policy: ResidualPolicy,
    pub best_policy: ResidualPolicy,
    /// Iteration after which the best policy was captured; 0 is the
    /// untrained initialization.
    pub best_iteration: usize,
    pub best_success: f64,
    pub history: Vec<IterationMetrics>,
}

fn selection_eval(setup: &TrainSetup<'_>, policy: &ResidualPolicy) -> Result<f64> {
    let spec = EvalSpec {
        episodes: setup.ppo.eval_episodes,
        base_seed: setup.ppo.eval_seed,
        deterministic: true,
        ..setup.selection
    };
    let stack = PolicyStack::Residual {
        base: setup.base,
        residual: policy,
    };
    Ok(evaluate(stack, &setup.env, &spec)?.success_rate)
}

/// Replaces the Koopman operator by its closed-form fit on one collection
/// phase of the untrained policy. Other modes are left untouched.
pub fn edmd_warm_start(setup: &TrainSetup<'_>, policy: &mut ResidualPolicy) -> Result<()> {
    if !matches!(policy.dynamics, Some(DynamicsModel::Koopman(_))) {
        return Ok(());
    }
    let mut venv = VecEnv::new(setup.env, setup.ppo.num_envs, setup.seed ^ WARM_START_SALT);
    let buffer = collect_rollouts(&mut venv, setup.base, policy, setup.ppo.steps_per_env, None)?;
    if let Some(DynamicsModel::Koopman(model)) = policy.dynamics.as_mut() {
        model.fit_operator(&buffer.inputs.states, &buffer.executed, &buffer.next_states)?;
    }
    Ok(())
}

/// Trains `policy` for `setup.ppo.iterations` iterations.
pub fn train(setup: &TrainSetup<'_>, mut policy: ResidualPolicy, sinks: &mut TrainSinks<'_>) -> Result<TrainOutcome> {
    setup.ppo.validate()?;
    let cfg = &setup.ppo;
    let base_checksum = setup.base.checksum();
    let mut venv = VecEnv::new(setup.env, cfg.num_envs, setup.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    rng.set_stream(2);
    let mut opt = Optimizers::new(cfg);
    let mut best_policy = policy.clone();
    let mut best_success = selection_eval(setup, &policy)?;
    let mut best_iteration = 0;
    let mut history = Vec::with_capacity(cfg.iterations);
    let start = Instant::now();
    for it in 1..=cfg.iterations {
        let mut buffer = collect_rollouts(&mut venv, setup.base, &policy, cfg.steps_per_env, sinks.dump_path.as_deref())?;
        buffer.finalize(cfg.gamma, cfg.lambda)?;
        let m = update(&buffer, &mut policy, &mut opt, cfg, &mut rng)?;
        let due = it == cfg.iterations || (cfg.eval_every > 0 && it % cfg.eval_every == 0);
        let eval_success_rate = if due { Some(selection_eval(setup, &policy)?) } else { None };
        if let Some(rate) = eval_success_rate {
            if rate > best_success {
                best_success = rate;
                best_iteration = it;
                best_policy = policy.clone();
            }
        }
        let completed = &buffer.completed_returns;
        let record = IterationMetrics {
            iteration: it,
            env_steps: it * cfg.num_envs * cfg.steps_per_env,
            episodes_completed: completed.len(),
            mean_episode_reward: if completed.is_empty() {
                None
            } else {
                Some(completed.iter().sum::<f64>() / completed.len() as f64)
            },
            eval_success_rate,
            l_clip: m.l_clip,
            l_vf: m.l_vf,
            l_s: m.l_s,
            l_kpm: m.l_kpm,
            kl: m.kl,
            clip_fraction: m.clip_fraction,
            latent_norm_mean: m.latent_norm_mean,
            aborted: m.aborted,
        };
        if let Some(norm) = m.latent_norm_mean {
            crate::dynamics::flag_collapse(norm);
        }
        info!(
            "iteration {it}: reward {:?} eval {:?} kl {:.4} kpm {:?}",
            record.mean_episode_reward, record.eval_success_rate, record.kl, record.l_kpm
        );
        if let Some(w) = sinks.metrics.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&record)?)?;
        }
        if let Some(w) = sinks.timing.as_mut() {
            let t = TimingRecord {
                iteration: it,
                wall_seconds: start.elapsed().as_secs_f64(),
            };
            writeln!(w, "{}", serde_json::to_string(&t)?)?;
        }
        history.push(record);
    }
    if setup.base.checksum() != base_checksum {
        return Err(contract_err!("base policy parameters changed during residual training"));
    }
    Ok(TrainOutcome {
        final_policy: policy,
        best_policy,
        best_iteration,
        best_success,
        history,
    })
}
