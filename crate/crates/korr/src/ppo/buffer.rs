//! Lock-step environments and the rollout buffer they fill.

use std::io::Write;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::base::{BasePolicy, ChunkSlot};
use crate::env::{ActionVector, EnvConfig, PegInsertEnv, StateVector, ACTION_DIM, STATE_DIM};
use crate::error::{numeric_err, Result};
use crate::numeric::Matrix;
use crate::residual::{compose, sample_residual, to_world_units, PolicyInputs, ResidualPolicy};

/// Environments stepped together, each with its own generator for residual
/// sampling and its own base-policy chunk.
#[derive(Debug, Clone)]
pub struct VecEnv {
    envs: Vec<PegInsertEnv>,
    slots: Vec<ChunkSlot>,
    rngs: Vec<ChaCha8Rng>,
    obs: Vec<StateVector>,
    episode_ids: Vec<u64>,
    returns: Vec<f64>,
    next_episode: u64,
}

impl VecEnv {
    pub fn new(config: EnvConfig, num_envs: usize, seed: u64) -> Self {
        let mut master = ChaCha8Rng::seed_from_u64(seed);
        let mut envs = Vec::with_capacity(num_envs);
        let mut rngs = Vec::with_capacity(num_envs);
        for _ in 0..num_envs {
            envs.push(PegInsertEnv::new(config, master.next_u64()));
            rngs.push(ChaCha8Rng::seed_from_u64(master.next_u64()));
        }
        let obs = envs.iter().map(|e| *e.state()).collect();
        Self {
            envs,
            slots: vec![ChunkSlot::default(); num_envs],
            rngs,
            obs,
            episode_ids: (0..num_envs as u64).collect(),
            returns: vec![0.0; num_envs],
            next_episode: num_envs as u64,
        }
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn observations(&self) -> &[StateVector] {
        &self.obs
    }

    fn replan(&mut self, base: &BasePolicy) {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.slots[i].needs_replan()).collect();
        if idx.is_empty() {
            return;
        }
        let states: Vec<StateVector> = idx.iter().map(|&i| self.obs[i]).collect();
        for (i, chunk) in idx.into_iter().zip(base.chunks(&states)) {
            self.slots[i].install(chunk);
        }
    }
}

/// Per-step records of a collection phase, stored step-major: row
/// `t * num_envs + e` is step `t` of environment `e`.
#[derive(Debug, Clone)]
pub struct RolloutBuffer {
    pub num_envs: usize,
    pub steps: usize,
    pub inputs: PolicyInputs,
    /// Residual samples before scaling, in normalized action units.
    pub residuals: Matrix,
    pub means_old: Matrix,
    pub logstd_old: Vec<f64>,
    pub logp_old: Vec<f64>,
    pub values_old: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Executed actions divided by the action bounds.
    pub executed: Matrix,
    /// Normalized successor states, always from the same episode as the row.
    pub next_states: Matrix,
    pub episode: Vec<u64>,
    /// Value of the state following each environment's final step.
    pub last_values: Vec<f64>,
    pub completed_returns: Vec<f64>,
    pub advantages: Option<Vec<f64>>,
    pub returns: Option<Vec<f64>>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Computes advantages and returns per environment.
    pub fn finalize(&mut self, gamma: f64, lambda: f64) -> Result<()> {
        let (e, t) = (self.num_envs, self.steps);
        let mut adv = vec![0.0; e * t];
        let mut ret = vec![0.0; e * t];
        for env in 0..e {
            let rows: Vec<usize> = (0..t).map(|s| s * e + env).collect();
            let r: Vec<f64> = rows.iter().map(|&i| self.rewards[i]).collect();
            let v: Vec<f64> = rows.iter().map(|&i| self.values_old[i]).collect();
            let d: Vec<bool> = rows.iter().map(|&i| self.dones[i]).collect();
            let (a, g) = super::compute_gae(&r, &v, &d, self.last_values[env], gamma, lambda)?;
            for (k, &i) in rows.iter().enumerate() {
                adv[i] = a[k];
                ret[i] = g[k];
            }
        }
        self.advantages = Some(adv);
        self.returns = Some(ret);
        Ok(())
    }

    /// Writes the buffer as one JSON object per row.
    pub fn dump(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for i in 0..self.len() {
            let line = json!({
                "row": i,
                "state": self.inputs.states.row(i),
                "base_action": self.inputs.base_actions.row(i),
                "residual": self.residuals.row(i),
                "log_prob": self.logp_old[i],
                "value": self.values_old[i],
                "reward": self.rewards[i],
                "done": self.dones[i],
                "episode": self.episode[i],
            });
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

fn row_matrix(data: Vec<f64>, cols: usize) -> Matrix {
    Matrix::from_vec(data.len() / cols.max(1), cols, data).expect("rows pushed with fixed width")
}

/// Runs `steps` lock-step transitions with the base chunk cadence and
/// sampled residual corrections. On a non-finite value the partial buffer is
/// written to `dump_path` (when given) before the error is returned.
pub fn collect_rollouts(
    venv: &mut VecEnv,
    base: &BasePolicy,
    policy: &ResidualPolicy,
    steps: usize,
    dump_path: Option<&Path>,
) -> Result<RolloutBuffer> {
    let e = venv.len();
    let goal_width = if policy.config.goal_conditioned { STATE_DIM } else { 0 };
    let mut states = Vec::with_capacity(e * steps * STATE_DIM);
    let mut base_actions = Vec::with_capacity(e * steps * ACTION_DIM);
    let mut goals = Vec::with_capacity(e * steps * goal_width);
    let mut residuals = Vec::with_capacity(e * steps * ACTION_DIM);
    let mut means = Vec::with_capacity(e * steps * ACTION_DIM);
    let mut executed = Vec::with_capacity(e * steps * ACTION_DIM);
    let mut next_states = Vec::with_capacity(e * steps * STATE_DIM);
    let (mut logp, mut values, mut rewards, mut dones, mut episode) = (
        Vec::with_capacity(e * steps),
        Vec::with_capacity(e * steps),
        Vec::with_capacity(e * steps),
        Vec::with_capacity(e * steps),
        Vec::with_capacity(e * steps),
    );
    let mut completed_returns = Vec::new();
    let logstd = policy.nets.logstd.clone();
    let scale = policy.config.action_scale;
    let mut failure = None;
    'outer: for _ in 0..steps {
        venv.replan(base);
        let a_base: Vec<ActionVector> = venv.slots.iter_mut().map(ChunkSlot::next_action).collect();
        let inputs = policy.prepare(&venv.obs, &a_base);
        let fwd = policy.forward(&inputs)?;
        for i in 0..e {
            let mean = fwd.mean.row(i);
            let value = fwd.value[i];
            if !value.is_finite() || mean.iter().any(|m| !m.is_finite()) {
                failure = Some(numeric_err!("non-finite policy output for environment {i}"));
                break 'outer;
            }
            let (a_res, lp) = sample_residual(mean, &logstd, &mut venv.rngs[i]);
            let a_exe = compose(&a_base[i], &to_world_units(&a_res), scale);
            let step = venv.envs[i].step(&a_exe)?;
            if !step.next_state.is_finite() {
                failure = Some(numeric_err!("environment {i} produced a non-finite state"));
                break 'outer;
            }
            states.extend_from_slice(inputs.states.row(i));
            base_actions.extend_from_slice(inputs.base_actions.row(i));
            goals.extend_from_slice(inputs.goals.row(i));
            residuals.extend_from_slice(&a_res);
            means.extend_from_slice(mean);
            executed.extend_from_slice(&a_exe.normalized());
            next_states.extend(policy.normalizer.apply(&step.next_state.to_array()));
            logp.push(lp);
            values.push(value);
            rewards.push(step.reward);
            dones.push(step.done);
            episode.push(venv.episode_ids[i]);
            venv.returns[i] += step.reward;
            if step.done {
                completed_returns.push(venv.returns[i]);
                venv.returns[i] = 0.0;
                venv.obs[i] = venv.envs[i].reset();
                venv.slots[i].clear();
                venv.episode_ids[i] = venv.next_episode;
                venv.next_episode += 1;
            } else {
                venv.obs[i] = step.next_state;
            }
        }
    }
    let mut buffer = RolloutBuffer {
        num_envs: e,
        steps,
        inputs: PolicyInputs {
            states: row_matrix(states, STATE_DIM),
            base_actions: row_matrix(base_actions, ACTION_DIM),
            goals: Matrix::from_vec(logp.len(), goal_width, goals).expect("goal rows"),
        },
        residuals: row_matrix(residuals, ACTION_DIM),
        means_old: row_matrix(means, ACTION_DIM),
        logstd_old: logstd,
        logp_old: logp,
        values_old: values,
        rewards,
        dones,
        executed: row_matrix(executed, ACTION_DIM),
        next_states: row_matrix(next_states, STATE_DIM),
        episode,
        last_values: vec![0.0; e],
        completed_returns,
        advantages: None,
        returns: None,
    };
    if let Some(err) = failure {
        if let Some(path) = dump_path {
            buffer.dump(path)?;
        }
        return Err(err);
    }
    venv.replan(base);
    let peek: Vec<ActionVector> = venv.slots.iter().map(ChunkSlot::peek_action).collect();
    let fwd = policy.forward(&policy.prepare(&venv.obs, &peek))?;
    buffer.last_values = fwd.value;
    Ok(buffer)
}
