//! Frozen chunked base policy, behavior-cloned from scripted demonstrations.

use std::path::Path;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::env::{
    kinematics, scripted_expert, ActionVector, EnvConfig, PegInsertEnv, RandomnessLevel, StateVector, ACTION_DIM,
    STATE_DIM,
};
use crate::error::{config_err, KorrError, Result};
use crate::eval::{evaluate, EvalSpec, PolicyStack};
use crate::numeric::checkpoint::{Block, Checkpoint};
use crate::numeric::{Activation, Adam, AdamConfig, Matrix, MlpParams, Normalizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasePolicyConfig {
    pub pred_horizon: usize,
    pub action_horizon: usize,
    pub obs_horizon: usize,
    pub hidden: Vec<usize>,
    pub demo_count: usize,
    pub demo_level: RandomnessLevel,
    /// First environment seed used for demonstrations.
    pub demo_seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Lower edge of the accepted base success band.
    pub min_success: f64,
    /// Upper edge of the accepted base success band.
    pub max_success: f64,
}

impl Default for BasePolicyConfig {
    fn default() -> Self {
        Self {
            pred_horizon: 16,
            action_horizon: 8,
            obs_horizon: 1,
            hidden: vec![256, 256],
            demo_count: 50,
            demo_level: RandomnessLevel::Low,
            demo_seed: 10_000,
            epochs: 8,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
            min_success: 0.3,
            max_success: 0.9,
        }
    }
}

impl BasePolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.obs_horizon != 1 {
            return Err(config_err!("base.obs_horizon must be 1"));
        }
        if self.action_horizon == 0 || self.action_horizon > self.pred_horizon {
            return Err(config_err!(
                "base.action_horizon must be in 1..=pred_horizon ({})",
                self.pred_horizon
            ));
        }
        if self.demo_count == 0 || self.batch_size == 0 {
            return Err(config_err!("base.demo_count and base.batch_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.min_success) || self.min_success > self.max_success || self.max_success > 1.0 {
            return Err(config_err!("base success band must satisfy 0 <= min <= max <= 1"));
        }
        Ok(())
    }
}

/// `(state, next pred_horizon expert actions)` pairs from successful episodes.
#[derive(Debug, Clone, Default)]
pub struct DemoDataset {
    pub states: Vec<StateVector>,
    pub chunks: Vec<Vec<ActionVector>>,
    /// Episode each pair came from.
    pub episode: Vec<usize>,
    /// Environment seed of each retained episode.
    pub episode_seeds: Vec<u64>,
}

impl DemoDataset {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn episodes(&self) -> usize {
        self.episode_seeds.len()
    }

    /// Splits by episode: the last `n` episodes go to the second set.
    pub fn split_last_episodes(&self, n: usize) -> (DemoDataset, DemoDataset) {
        let cut = self.episodes().saturating_sub(n);
        let mut a = DemoDataset::default();
        let mut b = DemoDataset::default();
        for i in 0..self.len() {
            let dst = if self.episode[i] < cut { &mut a } else { &mut b };
            dst.states.push(self.states[i]);
            dst.chunks.push(self.chunks[i].clone());
            dst.episode.push(self.episode[i]);
        }
        a.episode_seeds = self.episode_seeds[..cut].to_vec();
        b.episode_seeds = self.episode_seeds[cut..].to_vec();
        b.episode.iter_mut().for_each(|e| *e -= cut);
        (a, b)
    }
}

/// Rolls the scripted expert on consecutive seeds until `demo_count`
/// successful episodes are collected.
///
/// Chunks that run past the end of an episode are completed by continuing
/// the expert on noise-free kinematics.
pub fn collect_demos(env: &EnvConfig, first_seed: u64, demo_count: usize, pred_horizon: usize) -> Result<DemoDataset> {
    let mut data = DemoDataset::default();
    let (mut attempts, mut failures) = (0usize, 0usize);
    let mut seed = first_seed;
    while data.episodes() < demo_count {
        attempts += 1;
        let mut sim = PegInsertEnv::new(*env, seed);
        let mut states = vec![*sim.state()];
        let mut actions = Vec::new();
        let success = loop {
            let a = scripted_expert(sim.state(), env);
            let r = sim.step(&a)?;
            actions.push(a);
            if r.done {
                break r.success;
            }
            states.push(*sim.state());
        };
        if success {
            let mut tail_state = *sim.state();
            for _ in 0..pred_horizon {
                let a = scripted_expert(&tail_state, env);
                actions.push(a);
                tail_state = kinematics(&tail_state, &a);
            }
            let ep = data.episodes();
            for (t, s) in states.iter().enumerate() {
                data.states.push(*s);
                data.chunks.push(actions[t..t + pred_horizon].to_vec());
                data.episode.push(ep);
            }
            data.episode_seeds.push(seed);
        } else {
            failures += 1;
            if attempts >= 10 && failures * 2 > attempts {
                return Err(config_err!(
                    "scripted expert failed {failures} of {attempts} demonstrations; demo level is unsuitable"
                ));
            }
        }
        seed += 1;
    }
    if failures * 2 > attempts {
        return Err(config_err!(
            "scripted expert failed {failures} of {attempts} demonstrations; demo level is unsuitable"
        ));
    }
    Ok(data)
}

/// A predicted sequence of actions and how far into it execution has gone.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk {
    pub actions: Vec<ActionVector>,
    pub cursor: usize,
    pub action_horizon: usize,
}

impl ActionChunk {
    /// True once `action_horizon` actions have been consumed.
    pub fn needs_replan(&self) -> bool {
        self.cursor >= self.action_horizon
    }

    pub fn next_action(&mut self) -> ActionVector {
        let a = self.actions[self.cursor];
        self.cursor += 1;
        a
    }
}

/// Per-environment chunk bookkeeping: re-plans every `action_horizon` steps.
#[derive(Debug, Clone, Default)]
pub struct ChunkSlot {
    chunk: Option<ActionChunk>,
}

impl ChunkSlot {
    pub fn needs_replan(&self) -> bool {
        self.chunk.as_ref().map_or(true, ActionChunk::needs_replan)
    }

    pub fn install(&mut self, chunk: ActionChunk) {
        self.chunk = Some(chunk);
    }

    pub fn clear(&mut self) {
        self.chunk = None;
    }

    pub fn next_action(&mut self) -> ActionVector {
        self.chunk.as_mut().expect("chunk installed before use").next_action()
    }

    /// The action `next_action` would return, without consuming it.
    pub fn peek_action(&self) -> ActionVector {
        let c = self.chunk.as_ref().expect("chunk installed before use");
        c.actions[c.cursor]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasePolicy {
    pub params: MlpParams,
    pub normalizer: Normalizer,
    pub pred_horizon: usize,
    pub action_horizon: usize,
}

impl BasePolicy {
    pub fn chunk(&self, state: &StateVector) -> ActionChunk {
        self.chunks(std::slice::from_ref(state)).pop().expect("one chunk")
    }

    /// Batched chunk prediction.
    pub fn chunks(&self, states: &[StateVector]) -> Vec<ActionChunk> {
        if states.is_empty() {
            return Vec::new();
        }
        let rows: Vec<[f64; STATE_DIM]> = states.iter().map(StateVector::to_array).collect();
        let x = self.normalizer.apply_rows(&rows);
        let y = self.params.predict_batch(&x).expect("base input width is fixed");
        (0..states.len())
            .map(|i| {
                let actions = y
                    .row(i)
                    .chunks_exact(ACTION_DIM)
                    .map(|a| ActionVector::from_normalized(a).clamped())
                    .collect();
                ActionChunk {
                    actions,
                    cursor: 0,
                    action_horizon: self.action_horizon,
                }
            })
            .collect()
    }

    /// Mean squared error of predicted chunks in normalized action units.
    pub fn chunk_mse(&self, data: &DemoDataset) -> f64 {
        let (x, y) = design(data, &self.normalizer);
        let pred = self.params.predict_batch(&x).expect("fixed widths");
        mse(&pred, &y)
    }

    pub fn checksum(&self) -> u64 {
        self.params.checksum()
    }
}

fn design(data: &DemoDataset, normalizer: &Normalizer) -> (Matrix, Matrix) {
    let rows: Vec<[f64; STATE_DIM]> = data.states.iter().map(StateVector::to_array).collect();
    let x = normalizer.apply_rows(&rows);
    let width = data.chunks.first().map_or(0, |c| c.len() * ACTION_DIM);
    let mut y = Matrix::zeros(data.len(), width);
    for (i, c) in data.chunks.iter().enumerate() {
        let flat: Vec<f64> = c.iter().flat_map(|a| a.normalized()).collect();
        y.row_mut(i).copy_from_slice(&flat);
    }
    (x, y)
}

fn mse(pred: &Matrix, target: &Matrix) -> f64 {
    let n = pred.data().len().max(1) as f64;
    pred.data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BcReport {
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Fits the chunk predictor by mean-squared error.
pub fn train_bc(data: &DemoDataset, config: &BasePolicyConfig) -> Result<(BasePolicy, BcReport)> {
    config.validate()?;
    if data.is_empty() {
        return Err(KorrError::Training("behavior cloning needs a non-empty dataset".into()));
    }
    let rows: Vec<[f64; STATE_DIM]> = data.states.iter().map(StateVector::to_array).collect();
    let normalizer = Normalizer::fit(&rows, 1e-6);
    let (x, y) = design(data, &normalizer);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sizes = vec![STATE_DIM];
    sizes.extend(&config.hidden);
    sizes.push(config.pred_horizon * ACTION_DIM);
    let mut params = MlpParams::new(&sizes, Activation::Relu, &mut rng);
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let width = y.cols() as f64;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let xb = x.select_rows(batch);
            let yb = y.select_rows(batch);
            let (pred, cache) = params.forward_batch(&xb)?;
            let diff = pred.sub(&yb)?;
            let scale = 2.0 / (batch.len() as f64 * width);
            total += diff.data().iter().map(|d| d * d).sum::<f64>() / width;
            count += batch.len();
            let (grads, _) = params.backward(&cache, &diff.scale(scale))?;
            adam.step(&mut params, &grads)?;
        }
        let loss = total / count as f64;
        debug!("bc epoch {epoch}: loss {loss:.6}");
        if !loss.is_finite() || epoch_losses.first().is_some_and(|&first: &f64| loss > 10.0 * first) {
            return Err(KorrError::Training(format!(
                "behavior cloning diverged at epoch {epoch} (loss {loss:e})"
            )));
        }
        epoch_losses.push(loss);
    }
    Ok((
        BasePolicy {
            params,
            normalizer,
            pred_horizon: config.pred_horizon,
            action_horizon: config.action_horizon,
        },
        BcReport { epoch_losses },
    ))
}

/// Collects demonstrations at `config.demo_level`, fits the base policy and
/// evaluates it without disturbance at the demonstration level with the
/// episode count and seed of `eval`. A success rate outside the configured
/// band is logged, not rejected.
pub fn train_base(env: &EnvConfig, config: &BasePolicyConfig, eval: &EvalSpec) -> Result<(BaseCheckpoint, BcReport)> {
    config.validate()?;
    let demo_env = EnvConfig {
        randomness_level: config.demo_level,
        disturb_enabled: false,
        ..*env
    };
    let data = collect_demos(&demo_env, config.demo_seed, config.demo_count, config.pred_horizon)?;
    let (policy, report) = train_bc(&data, config)?;
    let spec = EvalSpec {
        level: config.demo_level,
        disturb: false,
        ..*eval
    };
    let result = evaluate(PolicyStack::Base(&policy), env, &spec)?;
    if result.success_rate < config.min_success || result.success_rate > config.max_success {
        warn!(
            "base success {:.3} lies outside [{}, {}]",
            result.success_rate, config.min_success, config.max_success
        );
    }
    let ck = BaseCheckpoint {
        policy,
        config: config.clone(),
        training_seed: config.seed,
        eval: Some(BaseEvalRecord {
            level: spec.level,
            disturb: spec.disturb,
            episodes: result.episodes,
            successes: result.successes,
            success_rate: result.success_rate,
            seed: spec.base_seed,
        }),
    };
    Ok((ck, report))
}

/// Evaluation record attached to a base checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseEvalRecord {
    pub level: RandomnessLevel,
    pub disturb: bool,
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseCheckpoint {
    pub policy: BasePolicy,
    pub config: BasePolicyConfig,
    pub training_seed: u64,
    pub eval: Option<BaseEvalRecord>,
}

impl BaseCheckpoint {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(json!({
            "kind": "base",
            "config": self.config,
            "training_seed": self.training_seed,
            "eval": self.eval,
            "normalizer": self.policy.normalizer,
        }));
        ck.push("policy", Block::Mlp(self.policy.params.clone()));
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = &ck.metadata;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("base") {
            return Err(KorrError::Format("checkpoint is not a base policy".into()));
        }
        let config: BasePolicyConfig = serde_json::from_value(meta["config"].clone())?;
        let normalizer: Normalizer = serde_json::from_value(meta["normalizer"].clone())?;
        let eval: Option<BaseEvalRecord> = serde_json::from_value(meta["eval"].clone())?;
        let training_seed = meta["training_seed"].as_u64().unwrap_or(config.seed);
        let params = ck.mlp("policy")?;
        if params.input_dim() != STATE_DIM || params.output_dim() != config.pred_horizon * ACTION_DIM {
            return Err(config_err!(
                "base network maps {} -> {}, expected {} -> {}",
                params.input_dim(),
                params.output_dim(),
                STATE_DIM,
                config.pred_horizon * ACTION_DIM
            ));
        }
        Ok(Self {
            policy: BasePolicy {
                params,
                normalizer,
                pred_horizon: config.pred_horizon,
                action_horizon: config.action_horizon,
            },
            config,
            training_seed,
            eval,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// The evaluation record, or an error if the base was never evaluated.
    pub fn require_eval(&self) -> Result<&BaseEvalRecord> {
        self.eval.as_ref().ok_or_else(|| {
            config_err!("base checkpoint has no evaluation record; run `korr train-base` to produce an evaluated base")
        })
    }
}
