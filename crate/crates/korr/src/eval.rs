//! Matched-seed success-rate evaluation, generalization drop, paired sign
//! test, prediction-drift curves and result tables.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::base::{BasePolicy, ChunkSlot};
use crate::dynamics::{aggregate_curves, koopman_rollout, nonlinear_rollout, CurvePoint, KoopmanModel, NonlinearDynModel};
use crate::env::{scripted_expert, ActionVector, EnvConfig, PegInsertEnv, RandomnessLevel, StateVector};
use crate::error::{config_err, contract_err, dim_err, Result};
use crate::numeric::Matrix;
use crate::residual::{compose, mean_residual, sample_residual, to_world_units, ResidualPolicy};

/// Episodes simulated together in one batch.
const EVAL_BLOCK: usize = 256;

/// The controller under evaluation.
#[derive(Debug, Clone, Copy)]
pub enum PolicyStack<'a> {
    Expert,
    Base(&'a BasePolicy),
    Residual {
        base: &'a BasePolicy,
        residual: &'a ResidualPolicy,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    pub level: RandomnessLevel,
    pub disturb: bool,
    pub episodes: usize,
    /// Episode `i` uses environment seed `base_seed + i`.
    pub base_seed: u64,
    /// Use the residual mean instead of sampling.
    pub deterministic: bool,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            level: RandomnessLevel::Low,
            disturb: false,
            episodes: 512,
            base_seed: 0,
            deterministic: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub success_rate: f64,
    pub successes: usize,
    pub episodes: usize,
    pub mean_episode_length: f64,
    pub outcomes: Vec<bool>,
    pub lengths: Vec<usize>,
}

struct Episode {
    env: PegInsertEnv,
    slot: ChunkSlot,
    rng: ChaCha8Rng,
    obs: StateVector,
    index: usize,
}

fn base_actions(base: &BasePolicy, active: &mut [Episode]) -> Vec<ActionVector> {
    let replan: Vec<usize> = (0..active.len()).filter(|&i| active[i].slot.needs_replan()).collect();
    if !replan.is_empty() {
        let states: Vec<StateVector> = replan.iter().map(|&i| active[i].obs).collect();
        for (i, chunk) in replan.into_iter().zip(base.chunks(&states)) {
            active[i].slot.install(chunk);
        }
    }
    active.iter_mut().map(|e| e.slot.next_action()).collect()
}

/// Runs `spec.episodes` episodes under the matched seed schedule.
pub fn evaluate(stack: PolicyStack<'_>, env: &EnvConfig, spec: &EvalSpec) -> Result<EvalResult> {
    if spec.episodes == 0 {
        return Err(config_err!("eval.episodes must be at least 1"));
    }
    let config = EnvConfig {
        randomness_level: spec.level,
        disturb_enabled: spec.disturb,
        ..*env
    };
    config.validate()?;
    let mut outcomes = vec![false; spec.episodes];
    let mut lengths = vec![0usize; spec.episodes];
    let mut start = 0;
    while start < spec.episodes {
        let end = (start + EVAL_BLOCK).min(spec.episodes);
        let mut active: Vec<Episode> = (start..end)
            .map(|i| {
                let seed = spec.base_seed + i as u64;
                let env = PegInsertEnv::new(config, seed);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(1);
                Episode {
                    obs: *env.state(),
                    env,
                    slot: ChunkSlot::default(),
                    rng,
                    index: i,
                }
            })
            .collect();
        while !active.is_empty() {
            let actions: Vec<ActionVector> = match stack {
                PolicyStack::Expert => active.iter().map(|e| scripted_expert(&e.obs, &config)).collect(),
                PolicyStack::Base(base) => base_actions(base, &mut active),
                PolicyStack::Residual { base, residual } => {
                    let a_base = base_actions(base, &mut active);
                    let states: Vec<StateVector> = active.iter().map(|e| e.obs).collect();
                    let (mean, _) = residual.evaluate(&states, &a_base)?;
                    let logstd = &residual.nets.logstd;
                    (0..active.len())
                        .map(|i| {
                            let (a_res, _) = if spec.deterministic {
                                mean_residual(mean.row(i), logstd)
                            } else {
                                sample_residual(mean.row(i), logstd, &mut active[i].rng)
                            };
                            compose(&a_base[i], &to_world_units(&a_res), residual.config.action_scale)
                        })
                        .collect()
                }
            };
            let mut still = Vec::with_capacity(active.len());
            for (mut ep, a) in active.into_iter().zip(actions) {
                let step = ep.env.step(&a)?;
                if step.done {
                    outcomes[ep.index] = step.success;
                    lengths[ep.index] = ep.env.steps();
                } else {
                    ep.obs = step.next_state;
                    still.push(ep);
                }
            }
            active = still;
        }
        start = end;
    }
    let successes = outcomes.iter().filter(|&&s| s).count();
    Ok(EvalResult {
        success_rate: successes as f64 / spec.episodes as f64,
        successes,
        episodes: spec.episodes,
        mean_episode_length: lengths.iter().sum::<usize>() as f64 / spec.episodes as f64,
        outcomes,
        lengths,
    })
}

/// `(rate_low - rate_med) / rate_low * 100`.
pub fn generalization_drop(rate_low: f64, rate_med: f64) -> Result<f64> {
    if rate_low <= 0.0 {
        return Err(contract_err!("generalization drop is undefined when the in-distribution rate is 0"));
    }
    Ok((rate_low - rate_med) / rate_low * 100.0)
}

/// Discordant-pair counts and the one-sided exact p-value for "first beats
/// second".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub first_only: usize,
    pub second_only: usize,
    pub p_value: f64,
}

/// Paired sign test over matched episodes.
pub fn paired_sign_test(first: &[bool], second: &[bool]) -> Result<SignTest> {
    if first.len() != second.len() {
        return Err(dim_err!("paired outcomes of lengths {} and {}", first.len(), second.len()));
    }
    let first_only = first.iter().zip(second).filter(|(a, b)| **a && !**b).count();
    let second_only = first.iter().zip(second).filter(|(a, b)| !**a && **b).count();
    Ok(SignTest {
        first_only,
        second_only,
        p_value: binomial_upper_tail(first_only + second_only, first_only),
    })
}

/// `P(X >= k)` for `X ~ Binomial(n, 1/2)`.
pub fn binomial_upper_tail(n: usize, k: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    let ln_half_n = n as f64 * 0.5f64.ln();
    let mut ln_choose = 0.0; // ln C(n, 0)
    let mut total = 0.0;
    for i in 0..=n {
        if i >= k {
            total += (ln_choose + ln_half_n).exp();
        }
        if i < n {
            ln_choose += ((n - i) as f64).ln() - ((i + 1) as f64).ln();
        }
    }
    total.min(1.0)
}

/// Recorded states `x_0 .. x_T` and actions `a_0 .. a_{T-1}` of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Matrix,
    pub actions: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub horizon: usize,
    pub koopman: Vec<CurvePoint>,
    pub nonlinear: Vec<CurvePoint>,
    /// Final-step error of every rollout, per model.
    pub koopman_final: Vec<f64>,
    pub nonlinear_final: Vec<f64>,
    /// Rollouts whose Koopman final-step error is strictly below the
    /// nonlinear one.
    pub koopman_below: usize,
}

/// Open-loop rollouts of both models on the same held-out trajectories.
pub fn drift_study(
    koopman: &KoopmanModel,
    nonlinear: &NonlinearDynModel,
    trajectories: &[Trajectory],
    horizon: usize,
) -> Result<DriftReport> {
    let mut k_runs = Vec::with_capacity(trajectories.len());
    let mut n_runs = Vec::with_capacity(trajectories.len());
    for t in trajectories {
        k_runs.push(koopman_rollout(koopman, &t.states, &t.actions, horizon)?);
        n_runs.push(nonlinear_rollout(nonlinear, &t.states, &t.actions, horizon)?);
    }
    let koopman_final: Vec<f64> = k_runs.iter().map(|r| r.errors[horizon - 1]).collect();
    let nonlinear_final: Vec<f64> = n_runs.iter().map(|r| r.errors[horizon - 1]).collect();
    let koopman_below = koopman_final.iter().zip(&nonlinear_final).filter(|(k, n)| k < n).count();
    Ok(DriftReport {
        horizon,
        koopman: aggregate_curves(&k_runs)?,
        nonlinear: aggregate_curves(&n_runs)?,
        koopman_final,
        nonlinear_final,
        koopman_below,
    })
}

/// Plot-ready `step mean std` lines.
pub fn curve_text(curve: &[CurvePoint]) -> String {
    let mut out = String::from("step mean std\n");
    for p in curve {
        let _ = writeln!(out, "{} {:e} {:e}", p.step, p.mean, p.std);
    }
    out
}

/// One cell of a results grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub method: String,
    pub level: RandomnessLevel,
    pub disturb: bool,
    pub episodes: usize,
    pub successes: usize,
    pub rate: f64,
    pub seed: u64,
}

impl ResultRecord {
    pub fn new(method: &str, spec: &EvalSpec, result: &EvalResult) -> Self {
        Self {
            method: method.to_string(),
            level: spec.level,
            disturb: spec.disturb,
            episodes: result.episodes,
            successes: result.successes,
            rate: result.success_rate,
            seed: spec.base_seed,
        }
    }
}

/// Method-by-(level, condition) grid as markdown plus one JSON record per
/// cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultsTable {
    pub markdown: String,
    pub jsonl: String,
}

pub fn results_table(records: &[ResultRecord]) -> Result<ResultsTable> {
    if let Some(first) = records.first() {
        if records.iter().any(|r| r.episodes != first.episodes) {
            return Err(contract_err!("result records mix different episode counts"));
        }
    }
    let mut methods: Vec<&str> = Vec::new();
    for r in records {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let columns: BTreeSet<(RandomnessLevel, bool)> = records.iter().map(|r| (r.level, r.disturb)).collect();
    let mut md = String::new();
    if !records.is_empty() {
        md.push_str("| method |");
        for (level, disturb) in &columns {
            let _ = write!(md, " {} {} |", level, if *disturb { "w/" } else { "w/o" });
        }
        md.push_str("\n|---|");
        md.push_str(&"---|".repeat(columns.len()));
        md.push('\n');
        for m in &methods {
            let _ = write!(md, "| {m} |");
            for (level, disturb) in &columns {
                match records
                    .iter()
                    .find(|r| r.method == *m && r.level == *level && r.disturb == *disturb)
                {
                    Some(r) => {
                        let _ = write!(md, " {:.2} |", r.rate * 100.0);
                    }
                    None => md.push_str(" - |"),
                }
            }
            md.push('\n');
        }
    }
    let mut jsonl = String::new();
    for r in records {
        jsonl.push_str(&serde_json::to_string(r)?);
        jsonl.push('\n');
    }
    Ok(ResultsTable { markdown: md, jsonl })
}

pub fn parse_records(jsonl: &str) -> Result<Vec<ResultRecord>> {
    jsonl
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
