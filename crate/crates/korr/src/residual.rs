//! Gaussian residual actor-critic and its conditioning modes.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dynamics::{DynamicsCache, DynamicsConfig, DynamicsModel};
use crate::env::{ActionVector, RandomnessLevel, StateVector, ACTION_BOUNDS, ACTION_DIM, STATE_DIM};
use crate::error::{config_err, dim_err, KorrError, Result};
use crate::numeric::checkpoint::{Block, Checkpoint};
use crate::numeric::{Activation, Matrix, MlpCache, MlpParams, Normalizer, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// Conditions on the imagined next latent state `A g(x) + B a_base`.
    Korr,
    /// Conditions on the raw state and the base action.
    Resip,
    /// Conditions on the next state predicted by a nonlinear network.
    ResipNonlinDyn,
}

impl ResidualMode {
    pub const ALL: [ResidualMode; 3] = [ResidualMode::Korr, ResidualMode::Resip, ResidualMode::ResipNonlinDyn];

    pub fn name(self) -> &'static str {
        match self {
            ResidualMode::Korr => "korr",
            ResidualMode::Resip => "resip",
            ResidualMode::ResipNonlinDyn => "resip_nonlin_dyn",
        }
    }

    pub fn uses_dynamics(self) -> bool {
        !matches!(self, ResidualMode::Resip)
    }
}

impl std::str::FromStr for ResidualMode {
    type Err = KorrError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "korr" => Ok(ResidualMode::Korr),
            "resip" => Ok(ResidualMode::Resip),
            "resip_nonlin_dyn" => Ok(ResidualMode::ResipNonlinDyn),
            _ => Err(config_err!("unknown residual mode `{s}` (expected korr, resip or resip-nonlin-dyn)")),
        }
    }
}

impl std::fmt::Display for ResidualMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResidualConfig {
    pub mode: ResidualMode,
    /// Multiplies the sampled residual before it is added to the base action.
    pub action_scale: f64,
    pub init_logstd: f64,
    pub learn_std: bool,
    pub hidden: Vec<usize>,
    /// Append the episode's success-configuration state to the conditioning.
    pub goal_conditioned: bool,
    pub critic_init_std: f64,
    pub critic_init_bias: f64,
}

impl Default for ResidualConfig {
    fn default() -> Self {
        Self {
            mode: ResidualMode::Korr,
            action_scale: 0.1,
            init_logstd: -1.0,
            learn_std: false,
            hidden: vec![256, 256],
            goal_conditioned: false,
            critic_init_std: 0.25,
            critic_init_bias: 0.25,
        }
    }
}

impl ResidualConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.action_scale > 0.0 && self.action_scale.is_finite()) {
            return Err(config_err!("residual.action_scale must be positive"));
        }
        if !self.init_logstd.is_finite() {
            return Err(config_err!("residual.init_logstd must be finite"));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(config_err!("residual.hidden widths must be positive"));
        }
        Ok(())
    }
}

/// `a_exe = clamp(a_base + scale * a_res)`; clamping follows the sum.
pub fn compose(a_base: &ActionVector, a_res: &[f64], action_scale: f64) -> ActionVector {
    let b = a_base.to_array();
    ActionVector::new(
        b[0] + action_scale * a_res[0],
        b[1] + action_scale * a_res[1],
        b[2] + action_scale * a_res[2],
    )
    .clamped()
}

/// Residual sample expressed in world action units: each normalized
/// component is multiplied by the corresponding action bound.
pub fn to_world_units(a_res: &[f64]) -> [f64; ACTION_DIM] {
    [a_res[0] * ACTION_BOUNDS[0], a_res[1] * ACTION_BOUNDS[1], a_res[2] * ACTION_BOUNDS[2]]
}

/// Log density of a diagonal Gaussian at `x`.
pub fn gaussian_log_prob(x: &[f64], mean: &[f64], logstd: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(logstd)
        .map(|((x, m), ls)| {
            let z = (x - m) / ls.exp();
            -0.5 * z * z - ls - 0.5 * (2.0 * PI).ln()
        })
        .sum()
}

/// Closed-form entropy of a diagonal Gaussian.
pub fn gaussian_entropy(logstd: &[f64]) -> f64 {
    logstd.iter().map(|ls| ls + 0.5 * (2.0 * PI * std::f64::consts::E).ln()).sum()
}

/// Draws from the diagonal Gaussian; returns the sample and its log density.
pub fn sample_residual<R: Rng + ?Sized>(mean: &[f64], logstd: &[f64], rng: &mut R) -> (Vec<f64>, f64) {
    let x: Vec<f64> = mean
        .iter()
        .zip(logstd)
        .map(|(m, ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let lp = gaussian_log_prob(&x, mean, logstd);
    (x, lp)
}

/// Deterministic mode: the mean and its log density.
pub fn mean_residual(mean: &[f64], logstd: &[f64]) -> (Vec<f64>, f64) {
    (mean.to_vec(), gaussian_log_prob(mean, mean, logstd))
}

/// Actor, critic and log standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorCritic {
    pub actor: MlpParams,
    pub critic: MlpParams,
    pub logstd: Vec<f64>,
}

impl ActorCritic {
    pub fn new<R: Rng + ?Sized>(cond_dim: usize, config: &ResidualConfig, rng: &mut R) -> Self {
        let mut sizes = vec![cond_dim];
        sizes.extend(&config.hidden);
        let mut actor_sizes = sizes.clone();
        actor_sizes.push(ACTION_DIM);
        sizes.push(1);
        let actor = MlpParams::new(&actor_sizes, Activation::Relu, rng)
            .with_zero_output()
            .without_output_bias();
        let critic = MlpParams::new(&sizes, Activation::Relu, rng).with_orthogonal_output(
            config.critic_init_std,
            config.critic_init_bias,
            rng,
        );
        Self {
            actor,
            critic,
            logstd: vec![config.init_logstd; ACTION_DIM],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            actor: self.actor.zeros_like(),
            critic: self.critic.zeros_like(),
            logstd: vec![0.0; self.logstd.len()],
        }
    }
}

impl Parameters for ActorCritic {
    fn slices(&self) -> Vec<&[f64]> {
        let mut out = self.actor.slices();
        out.extend(self.critic.slices());
        out.push(&self.logstd);
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.actor.slices_mut();
        out.extend(self.critic.slices_mut());
        out.push(&mut self.logstd);
        out
    }
}

/// Raw per-step inputs from which the conditioning vector is assembled.
///
/// States are normalized with the demonstration statistics and actions are
/// divided by the action bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyInputs {
    pub states: Matrix,
    pub base_actions: Matrix,
    pub goals: Matrix,
}

impl PolicyInputs {
    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            states: self.states.select_rows(idx),
            base_actions: self.base_actions.select_rows(idx),
            goals: self.goals.select_rows(idx),
        }
    }
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct PolicyForward {
    pub cond: Matrix,
    pub mean: Matrix,
    pub value: Vec<f64>,
    actor_cache: MlpCache,
    critic_cache: MlpCache,
    dynamics_cache: Option<DynamicsCache>,
}

/// Residual policy bundle: networks, optional dynamics model and the
/// normalization statistics shared with the base policy.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualPolicy {
    pub config: ResidualConfig,
    pub nets: ActorCritic,
    pub dynamics: Option<DynamicsModel>,
    pub normalizer: Normalizer,
}

impl ResidualPolicy {
    pub fn new<R: Rng + ?Sized>(
        config: ResidualConfig,
        normalizer: Normalizer,
        dynamics: Option<DynamicsModel>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let expected = match config.mode {
            ResidualMode::Korr => matches!(dynamics, Some(DynamicsModel::Koopman(_))),
            ResidualMode::ResipNonlinDyn => matches!(dynamics, Some(DynamicsModel::Nonlinear(_))),
            ResidualMode::Resip => dynamics.is_none(),
        };
        if !expected {
            return Err(config_err!("mode {} does not match the supplied dynamics model", config.mode));
        }
        if normalizer.dim() != STATE_DIM {
            return Err(dim_err!("normalizer has width {}, states have {}", normalizer.dim(), STATE_DIM));
        }
        let cond_dim = cond_dim(&config, dynamics.as_ref());
        let nets = ActorCritic::new(cond_dim, &config, rng);
        Ok(Self {
            config,
            nets,
            dynamics,
            normalizer,
        })
    }

    /// Builds the mode's dynamics model and then the actor-critic, both
    /// from one generator seeded with `seed`.
    pub fn initialize(config: ResidualConfig, dynamics: &DynamicsConfig, normalizer: Normalizer, seed: u64) -> Result<Self> {
        dynamics.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = dynamics.build(config.mode, STATE_DIM, ACTION_DIM, &mut rng);
        Self::new(config, normalizer, model, &mut rng)
    }

    pub fn cond_dim(&self) -> usize {
        cond_dim(&self.config, self.dynamics.as_ref())
    }

    /// Normalized inputs for a batch of states and base actions.
    pub fn prepare(&self, states: &[StateVector], base_actions: &[ActionVector]) -> PolicyInputs {
        let rows: Vec<[f64; STATE_DIM]> = states.iter().map(StateVector::to_array).collect();
        let goals: Vec<[f64; STATE_DIM]> = states.iter().map(|s| s.goal().to_array()).collect();
        let actions: Vec<[f64; ACTION_DIM]> = base_actions.iter().map(ActionVector::normalized).collect();
        PolicyInputs {
            states: self.normalizer.apply_rows(&rows),
            base_actions: Matrix::from_rows(&actions).unwrap_or_else(|_| Matrix::zeros(0, ACTION_DIM)),
            goals: if self.config.goal_conditioned {
                self.normalizer.apply_rows(&goals)
            } else {
                Matrix::zeros(states.len(), 0)
            },
        }
    }

    fn condition(&self, inputs: &PolicyInputs) -> Result<(Matrix, Option<DynamicsCache>)> {
        let (core, cache) = match (self.config.mode, &self.dynamics) {
            (ResidualMode::Resip, _) => (inputs.states.hcat(&inputs.base_actions)?, None),
            (_, Some(dyn_model)) => {
                let (out, c) = dyn_model.imagine_batch(&inputs.states, &inputs.base_actions)?;
                (out, Some(c))
            }
            (mode, None) => return Err(config_err!("mode {mode} needs a dynamics model")),
        };
        let cond = if self.config.goal_conditioned {
            core.hcat(&inputs.goals)?
        } else {
            core
        };
        if cond.cols() != self.nets.actor.input_dim() {
            return Err(dim_err!(
                "conditioning width {} does not match actor input {}",
                cond.cols(),
                self.nets.actor.input_dim()
            ));
        }
        Ok((cond, cache))
    }

    pub fn forward(&self, inputs: &PolicyInputs) -> Result<PolicyForward> {
        let (cond, dynamics_cache) = self.condition(inputs)?;
        let (mean, actor_cache) = self.nets.actor.forward_batch(&cond)?;
        let (value, critic_cache) = self.nets.critic.forward_batch(&cond)?;
        Ok(PolicyForward {
            cond,
            mean,
            value: value.into_vec(),
            actor_cache,
            critic_cache,
            dynamics_cache,
        })
    }

    /// Gradients given the loss gradient with respect to the action mean, the
    /// log standard deviation and the value. Dynamics gradients are produced
    /// only when `through_dynamics` is set and the mode has a dynamics model.
    pub fn backward(
        &self,
        fwd: &PolicyForward,
        d_mean: &Matrix,
        d_logstd: &[f64],
        d_value: &[f64],
        through_dynamics: bool,
    ) -> Result<(ActorCritic, Option<DynamicsModel>)> {
        let (actor_g, d_cond_actor) = self.nets.actor.backward(&fwd.actor_cache, d_mean)?;
        let d_value = Matrix::from_vec(d_value.len(), 1, d_value.to_vec())?;
        let (critic_g, d_cond_critic) = self.nets.critic.backward(&fwd.critic_cache, &d_value)?;
        let logstd = if self.config.learn_std {
            d_logstd.to_vec()
        } else {
            vec![0.0; self.nets.logstd.len()]
        };
        let grads = ActorCritic {
            actor: actor_g,
            critic: critic_g,
            logstd,
        };
        let dyn_grads = match (&self.dynamics, &fwd.dynamics_cache, through_dynamics) {
            (Some(model), Some(cache), true) => {
                let d_cond = d_cond_actor.add(&d_cond_critic)?;
                let d_imagined = d_cond.col_slice(0, model.output_dim());
                Some(model.imagine_backward(cache, &d_imagined)?)
            }
            _ => None,
        };
        Ok((grads, dyn_grads))
    }

    /// Action means and values for a batch; convenience over [`forward`](Self::forward).
    pub fn evaluate(&self, states: &[StateVector], base_actions: &[ActionVector]) -> Result<(Matrix, Vec<f64>)> {
        let fwd = self.forward(&self.prepare(states, base_actions))?;
        Ok((fwd.mean, fwd.value))
    }
}

fn cond_dim(config: &ResidualConfig, dynamics: Option<&DynamicsModel>) -> usize {
    let core = match (config.mode, dynamics) {
        (ResidualMode::Resip, _) => STATE_DIM + ACTION_DIM,
        (_, Some(d)) => d.output_dim(),
        (_, None) => 0,
    };
    core + if config.goal_conditioned { STATE_DIM } else { 0 }
}

/// Provenance stored with a residual checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualMeta {
    pub training_level: RandomnessLevel,
    pub training_seed: u64,
    pub iteration: usize,
    pub bkp_rl_to_koopman: bool,
    pub eval_success: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualCheckpoint {
    pub policy: ResidualPolicy,
    pub meta: ResidualMeta,
}

impl ResidualCheckpoint {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let p = &self.policy;
        let mut ck = Checkpoint::new(json!({
            "kind": "residual",
            "config": p.config,
            "normalizer": p.normalizer,
            "dynamics": p.dynamics.as_ref().map(DynamicsModel::describe),
            "meta": self.meta,
        }));
        ck.push("actor", Block::Mlp(p.nets.actor.clone()));
        ck.push("critic", Block::Mlp(p.nets.critic.clone()));
        ck.push("logstd", Block::Vector(p.nets.logstd.clone()));
        if let Some(d) = &p.dynamics {
            d.write_blocks(&mut ck, "dynamics");
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let m = &ck.metadata;
        if m.get("kind").and_then(|k| k.as_str()) != Some("residual") {
            return Err(KorrError::Format("checkpoint is not a residual policy".into()));
        }
        let config: ResidualConfig = serde_json::from_value(m["config"].clone())?;
        let normalizer: Normalizer = serde_json::from_value(m["normalizer"].clone())?;
        let meta: ResidualMeta = serde_json::from_value(m["meta"].clone())?;
        let dynamics = match m.get("dynamics") {
            Some(d) if !d.is_null() => Some(DynamicsModel::read_blocks(ck, "dynamics", d)?),
            _ => None,
        };
        let nets = ActorCritic {
            actor: ck.mlp("actor")?,
            critic: ck.mlp("critic")?,
            logstd: ck.vector("logstd")?,
        };
        let policy = ResidualPolicy {
            config,
            nets,
            dynamics,
            normalizer,
        };
        let want = policy.cond_dim();
        if policy.nets.actor.input_dim() != want
            || policy.nets.critic.input_dim() != want
            || policy.nets.actor.output_dim() != ACTION_DIM
            || policy.nets.logstd.len() != ACTION_DIM
        {
            return Err(config_err!(
                "residual networks do not match mode {} (conditioning width {})",
                policy.config.mode,
                want
            ));
        }
        Ok(Self { policy, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
