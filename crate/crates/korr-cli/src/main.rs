//! `korr`: base training, residual training, evaluation grids and the
//! drift and extrapolation studies, one run directory per invocation.

mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{ArgAction, Args, Parser, Subcommand};
use korr::base::{train_base, BaseCheckpoint};
use korr::drift::run_drift;
use korr::dynamics::DynamicsModel;
use korr::env::RandomnessLevel;
use korr::eval::{curve_text, evaluate, results_table, EvalSpec, PolicyStack, ResultRecord};
use korr::extrapolation::run_study;
use korr::ppo::{edmd_warm_start, train, TrainSetup, TrainSinks};
use korr::residual::{ResidualCheckpoint, ResidualMeta, ResidualMode, ResidualPolicy};
use korr::{KorrError, Result};
use serde::Serialize;
use serde_json::json;

use crate::config::{resolve, ExperimentConfig};

#[derive(Parser, Debug)]
#[command(name = "korr", version, about = "Koopman-guided residual refinement on a peg-alignment task")]
struct Cli {
    /// TOML file layered over the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set ppo.gamma=0.9`. Repeatable; applied
    /// after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    run_name: Option<String>,
    /// Raise log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Collect demonstrations, fit and evaluate the frozen base policy.
    TrainBase,
    /// Train a residual policy on top of the base policy.
    TrainResidual(TrainResidualArgs),
    /// Evaluate the base policy or a residual checkpoint on one condition.
    Eval(EvalArgs),
    /// Evaluate the base and residual checkpoints on every level with and
    /// without disturbance.
    EvalGrid(GridArgs),
    /// Fit a Koopman and a nonlinear model on the same data and compare
    /// their open-loop drift.
    DriftStudy(BaseArg),
    /// Linear, polynomial and perceptron extrapolation comparison.
    ExtrapolationStudy,
    /// Print the resolved configuration.
    ShowConfig,
}

#[derive(Args, Debug)]
struct BaseArg {
    /// Base checkpoint; defaults to `<output_dir>/base/base.ckpt`.
    #[arg(long)]
    base: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainResidualArgs {
    #[arg(long)]
    mode: Option<ResidualMode>,
    /// Training randomness level.
    #[arg(long)]
    level: Option<RandomnessLevel>,
    /// Keep policy-loss gradients out of the dynamics model.
    #[arg(long)]
    no_bkp: bool,
    /// Append the goal state to the conditioning.
    #[arg(long)]
    goal: bool,
    #[arg(long)]
    lift_dim: Option<usize>,
    /// Initial (and, without learned std, fixed) log standard deviation.
    #[arg(long, allow_hyphen_values = true)]
    logstd: Option<f64>,
    #[command(flatten)]
    base: BaseArg,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Residual checkpoint; without it the base policy alone is evaluated.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    level: Option<RandomnessLevel>,
    #[arg(long)]
    disturb: bool,
    #[arg(long)]
    episodes: Option<usize>,
    #[command(flatten)]
    base: BaseArg,
}

#[derive(Args, Debug)]
struct GridArgs {
    /// Residual checkpoints to include. Repeatable.
    #[arg(long)]
    residual: Vec<PathBuf>,
    #[arg(long)]
    episodes: Option<usize>,
    #[command(flatten)]
    base: BaseArg,
}

fn toml_literal<T: Serialize>(v: &T) -> String {
    toml::Value::try_from(v).map(|v| v.to_string()).unwrap_or_default()
}

/// Flag values become overrides applied after `--set`.
fn flag_overrides(cli: &Cli) -> Vec<String> {
    let mut o = cli.set.clone();
    if let Some(s) = cli.seed {
        o.push(format!("seed={s}"));
    }
    if let Some(d) = &cli.output_dir {
        o.push(format!("output_dir={}", toml_literal(&d.display().to_string())));
    }
    if let Some(n) = &cli.run_name {
        o.push(format!("run_name={}", toml_literal(n)));
    }
    match &cli.command {
        Command::TrainResidual(a) => {
            if let Some(m) = a.mode {
                o.push(format!("residual.mode={}", toml_literal(&m)));
            }
            if let Some(l) = a.level {
                o.push(format!("env.randomness_level={}", toml_literal(&l)));
            }
            if a.no_bkp {
                o.push("ppo.bkp_rl_to_koopman=false".into());
            }
            if a.goal {
                o.push("residual.goal_conditioned=true".into());
            }
            if let Some(d) = a.lift_dim {
                o.push(format!("dynamics.lift_dim={d}"));
            }
            if let Some(s) = a.logstd {
                o.push(format!("residual.init_logstd={}", toml_literal(&s)));
            }
        }
        Command::Eval(a) => {
            if let Some(l) = a.level {
                o.push(format!("eval.level={}", toml_literal(&l)));
            }
            if a.disturb {
                o.push("eval.disturb=true".into());
            }
            if let Some(n) = a.episodes {
                o.push(format!("eval.episodes={n}"));
            }
        }
        Command::EvalGrid(a) => {
            if let Some(n) = a.episodes {
                o.push(format!("eval.episodes={n}"));
            }
        }
        _ => {}
    }
    o
}

fn default_run_name(cfg: &ExperimentConfig, command: &Command) -> String {
    match command {
        Command::TrainBase => "base".into(),
        Command::TrainResidual(_) => {
            let mut n = format!(
                "{}-{}",
                cfg.residual.mode.name().replace('_', "-"),
                cfg.env.randomness_level.name().to_lowercase()
            );
            if cfg.residual.mode == ResidualMode::Korr && !cfg.ppo.bkp_rl_to_koopman {
                n.push_str("-no-bkp");
            }
            if cfg.residual.goal_conditioned {
                n.push_str("-goal");
            }
            format!("{n}-s{}", cfg.seed)
        }
        Command::Eval(a) => format!(
            "eval-{}-{}-{}",
            if a.checkpoint.is_some() { "residual" } else { "base" },
            cfg.eval.level.name().to_lowercase(),
            if cfg.eval.disturb { "w" } else { "wo" }
        ),
        Command::EvalGrid(_) => "grid".into(),
        Command::DriftStudy(_) => "drift".into(),
        Command::ExtrapolationStudy => "extrapolation".into(),
        Command::ShowConfig => String::new(),
    }
}

fn command_name(command: &Command) -> &'static str {
    match command {
        Command::TrainBase => "train-base",
        Command::TrainResidual(_) => "train-residual",
        Command::Eval(_) => "eval",
        Command::EvalGrid(_) => "eval-grid",
        Command::DriftStudy(_) => "drift-study",
        Command::ExtrapolationStudy => "extrapolation-study",
        Command::ShowConfig => "show-config",
    }
}

struct Run {
    dir: PathBuf,
    cfg: ExperimentConfig,
    outputs: Vec<String>,
}

impl Run {
    fn create(cfg: ExperimentConfig, command: &Command) -> Result<Self> {
        let name = if cfg.run_name.is_empty() {
            default_run_name(&cfg, command)
        } else {
            cfg.run_name.clone()
        };
        let dir = cfg.output_dir.join(name);
        std::fs::create_dir_all(&dir)?;
        let text = cfg.to_toml()?;
        std::fs::write(dir.join("config.toml"), &text)?;
        eprintln!("# resolved configuration\n{text}");
        Ok(Self {
            dir,
            cfg,
            outputs: vec!["config.toml".into()],
        })
    }

    fn path(&mut self, file: &str) -> PathBuf {
        self.outputs.push(file.to_string());
        self.dir.join(file)
    }

    fn write(&mut self, file: &str, contents: &str) -> Result<PathBuf> {
        let p = self.path(file);
        std::fs::write(&p, contents)?;
        Ok(p)
    }

    fn finish(mut self, command: &Command, started: Instant, extra: serde_json::Value) -> Result<()> {
        self.outputs.push("manifest.json".into());
        let manifest = json!({
            "command": command_name(command),
            "seed": self.cfg.seed,
            "run_dir": self.dir.display().to_string(),
            "korr_version": env!("CARGO_PKG_VERSION"),
            "args": std::env::args().collect::<Vec<_>>(),
            "wall_seconds": started.elapsed().as_secs_f64(),
            "outputs": self.outputs,
            "summary": extra,
        });
        std::fs::write(self.dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        eprintln!("run directory: {}", self.dir.display());
        Ok(())
    }
}

fn base_path(cfg: &ExperimentConfig, arg: &BaseArg) -> PathBuf {
    arg.base.clone().unwrap_or_else(|| cfg.output_dir.join("base").join("base.ckpt"))
}

fn load_base(path: &Path) -> Result<BaseCheckpoint> {
    if !path.exists() {
        return Err(KorrError::Contract(format!(
            "no base checkpoint at {}; run `korr train-base` first",
            path.display()
        )));
    }
    BaseCheckpoint::load(path)
}

fn load_residual(path: &Path) -> Result<ResidualCheckpoint> {
    if !path.exists() {
        return Err(KorrError::Contract(format!(
            "no residual checkpoint at {}; run `korr train-residual` first",
            path.display()
        )));
    }
    ResidualCheckpoint::load(path)
}

fn method_name(ck: &ResidualCheckpoint) -> String {
    let p = &ck.policy;
    let mut n = p.config.mode.name().replace('_', "-");
    if p.config.mode == ResidualMode::Korr && !ck.meta.bkp_rl_to_koopman {
        n.push_str("-no-bkp");
    }
    if p.config.goal_conditioned {
        n.push_str("-goal");
    }
    format!("{n}@{}", ck.meta.training_level.name().to_lowercase())
}

fn cmd_train_base(run: &mut Run) -> Result<serde_json::Value> {
    let cfg = run.cfg.clone();
    let base_cfg = korr::base::BasePolicyConfig {
        seed: cfg.base.seed.wrapping_add(cfg.seed),
        ..cfg.base.clone()
    };
    let (ck, report) = train_base(&cfg.env, &base_cfg, &cfg.eval)?;
    let mut metrics = String::new();
    for (epoch, loss) in report.epoch_losses.iter().enumerate() {
        metrics.push_str(&serde_json::to_string(&json!({"epoch": epoch + 1, "bc_loss": loss}))?);
        metrics.push('\n');
    }
    run.write("metrics.jsonl", &metrics)?;
    let p = run.path("base.ckpt");
    ck.save(&p)?;
    let eval = ck.require_eval()?;
    let record = ResultRecord {
        method: "base".into(),
        level: eval.level,
        disturb: eval.disturb,
        episodes: eval.episodes,
        successes: eval.successes,
        rate: eval.success_rate,
        seed: eval.seed,
    };
    run.write("results.jsonl", &results_table(&[record])?.jsonl)?;
    println!("{}", serde_json::to_string(eval)?);
    Ok(json!({"eval": eval}))
}

fn cmd_train_residual(run: &mut Run, base: &BaseArg) -> Result<serde_json::Value> {
    let cfg = run.cfg.clone();
    let base = load_base(&base_path(&cfg, base))?;
    let mut policy = ResidualPolicy::initialize(
        cfg.residual.clone(),
        &cfg.dynamics,
        base.policy.normalizer.clone(),
        cfg.seed,
    )?;
    let setup = TrainSetup {
        env: cfg.env,
        base: &base.policy,
        ppo: cfg.ppo.clone(),
        selection: EvalSpec {
            level: cfg.env.randomness_level,
            ..cfg.eval
        },
        seed: cfg.seed,
    };
    if cfg.dynamics.edmd_warm_start {
        edmd_warm_start(&setup, &mut policy)?;
    }
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(run.path("metrics.jsonl"))?);
    let mut timing = std::io::BufWriter::new(std::fs::File::create(run.path("timing.jsonl"))?);
    let dump = run.dir.join("failed_buffer.jsonl");
    let outcome = {
        let mut sinks = TrainSinks {
            metrics: Some(&mut metrics),
            timing: Some(&mut timing),
            dump_path: Some(dump),
        };
        train(&setup, policy, &mut sinks)?
    };
    metrics.flush()?;
    timing.flush()?;
    let meta = |iteration, success| ResidualMeta {
        training_level: cfg.env.randomness_level,
        training_seed: cfg.seed,
        iteration,
        bkp_rl_to_koopman: cfg.ppo.bkp_rl_to_koopman,
        eval_success: success,
    };
    ResidualCheckpoint {
        policy: outcome.best_policy.clone(),
        meta: meta(outcome.best_iteration, Some(outcome.best_success)),
    }
    .save(&run.path("residual.ckpt"))?;
    ResidualCheckpoint {
        policy: outcome.final_policy.clone(),
        meta: meta(cfg.ppo.iterations, outcome.history.last().and_then(|h| h.eval_success_rate)),
    }
    .save(&run.path("residual_final.ckpt"))?;
    if let Some(DynamicsModel::Koopman(k)) = &outcome.best_policy.dynamics {
        run.write("koopman_A.txt", &k.transition.to_text())?;
        run.write("koopman_B.txt", &k.input.to_text())?;
    }
    let summary = json!({
        "best_iteration": outcome.best_iteration,
        "best_selection_success": outcome.best_success,
        "iterations": cfg.ppo.iterations,
    });
    println!("{summary}");
    Ok(summary)
}

fn cmd_eval(run: &mut Run, args: &EvalArgs) -> Result<serde_json::Value> {
    let cfg = run.cfg.clone();
    let base = load_base(&base_path(&cfg, &args.base))?;
    let spec = cfg.eval;
    let (method, result) = match &args.checkpoint {
        Some(p) => {
            let ck = load_residual(p)?;
            let stack = PolicyStack::Residual {
                base: &base.policy,
                residual: &ck.policy,
            };
            (method_name(&ck), evaluate(stack, &cfg.env, &spec)?)
        }
        None => ("base".to_string(), evaluate(PolicyStack::Base(&base.policy), &cfg.env, &spec)?),
    };
    let record = ResultRecord::new(&method, &spec, &result);
    run.write("results.jsonl", &results_table(&[record.clone()])?.jsonl)?;
    let outcomes: String = result.outcomes.iter().map(|&s| if s { '1' } else { '0' }).collect();
    run.write("outcomes.txt", &(outcomes + "\n"))?;
    println!("{}", serde_json::to_string(&record)?);
    Ok(serde_json::to_value(&record)?)
}

fn cmd_eval_grid(run: &mut Run, args: &GridArgs) -> Result<serde_json::Value> {
    let cfg = run.cfg.clone();
    let base = load_base(&base_path(&cfg, &args.base))?;
    let residuals = args.residual.iter().map(|p| load_residual(p)).collect::<Result<Vec<_>>>()?;
    let mut records = Vec::new();
    for level in RandomnessLevel::ALL {
        for disturb in [false, true] {
            let spec = EvalSpec { level, disturb, ..cfg.eval };
            let r = evaluate(PolicyStack::Base(&base.policy), &cfg.env, &spec)?;
            records.push(ResultRecord::new("base", &spec, &r));
            for ck in &residuals {
                let stack = PolicyStack::Residual {
                    base: &base.policy,
                    residual: &ck.policy,
                };
                let r = evaluate(stack, &cfg.env, &spec)?;
                records.push(ResultRecord::new(&method_name(ck), &spec, &r));
            }
        }
    }
    let table = results_table(&records)?;
    run.write("results.jsonl", &table.jsonl)?;
    run.write("results.md", &table.markdown)?;
    print!("{}", table.markdown);
    Ok(json!({"cells": records.len()}))
}

fn cmd_drift(run: &mut Run, base: &BaseArg) -> Result<serde_json::Value> {
    let cfg = run.cfg.clone();
    let base = load_base(&base_path(&cfg, base))?;
    let drift = korr::drift::DriftConfig {
        seed: cfg.drift.seed.wrapping_add(cfg.seed),
        ..cfg.drift.clone()
    };
    let (outcome, koopman, _) = run_drift(&cfg.env, &base.policy, &drift)?;
    run.write("koopman_curve.txt", &curve_text(&outcome.report.koopman))?;
    run.write("nonlinear_curve.txt", &curve_text(&outcome.report.nonlinear))?;
    run.write("koopman_A.txt", &koopman.transition.to_text())?;
    run.write("koopman_B.txt", &koopman.input.to_text())?;
    run.write("drift.json", &serde_json::to_string_pretty(&outcome)?)?;
    let last = drift.horizon - 1;
    let summary = json!({
        "horizon": drift.horizon,
        "koopman_final_mean": outcome.report.koopman[last].mean,
        "nonlinear_final_mean": outcome.report.nonlinear[last].mean,
        "koopman_below": outcome.report.koopman_below,
        "rollouts": outcome.report.koopman_final.len(),
        "latent_norm_mean": outcome.latent_norm_mean,
        "koopman_final_relative": outcome.koopman_final_relative,
        "nonlinear_final_relative": outcome.nonlinear_final_relative,
    });
    println!("{summary}");
    Ok(summary)
}

fn cmd_extrapolation(run: &mut Run) -> Result<serde_json::Value> {
    let cfg = run.cfg.clone();
    let study = korr::extrapolation::StudyConfig {
        seed: cfg.study.seed.wrapping_add(cfg.seed),
        ..cfg.study.clone()
    };
    let report = run_study(&study)?;
    let p = run.path("curve.txt");
    report.write_curve(&p)?;
    let summary = report.summary_json();
    run.write("summary.json", &serde_json::to_string_pretty(&summary)?)?;
    println!("{summary}");
    Ok(summary)
}

fn exit_code(e: &KorrError) -> u8 {
    match e {
        KorrError::Config(_) => 2,
        KorrError::Numeric(_) | KorrError::Training(_) => 3,
        KorrError::Contract(_) | KorrError::Dimension(_) => 4,
        _ => 1,
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli.config.as_deref(), &flag_overrides(cli))?;
    if let Command::ShowConfig = cli.command {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let started = Instant::now();
    let mut run = Run::create(cfg, &cli.command)?;
    let summary = match &cli.command {
        Command::TrainBase => cmd_train_base(&mut run)?,
        Command::TrainResidual(a) => cmd_train_residual(&mut run, &a.base)?,
        Command::Eval(a) => cmd_eval(&mut run, a)?,
        Command::EvalGrid(a) => cmd_eval_grid(&mut run, a)?,
        Command::DriftStudy(a) => cmd_drift(&mut run, a)?,
        Command::ExtrapolationStudy => cmd_extrapolation(&mut run)?,
        Command::ShowConfig => unreachable!("handled above"),
    };
    run.finish(&cli.command, started, summary)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
