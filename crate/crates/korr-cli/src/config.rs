//! Layered experiment configuration: built-in defaults, then a TOML file,
//! then `key.path=value` overrides.

use std::path::{Path, PathBuf};

use korr::base::BasePolicyConfig;
use korr::drift::DriftConfig;
use korr::dynamics::DynamicsConfig;
use korr::env::EnvConfig;
use korr::eval::EvalSpec;
use korr::extrapolation::StudyConfig;
use korr::ppo::PpoConfig;
use korr::residual::ResidualConfig;
use korr::{KorrError, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

/// Environment variable that replaces the default output root.
pub const OUTPUT_ROOT_VAR: &str = "KORR_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Run directory name under `output_dir`; empty picks one per command.
    pub run_name: String,
    pub env: EnvConfig,
    pub base: BasePolicyConfig,
    pub dynamics: DynamicsConfig,
    pub residual: ResidualConfig,
    pub ppo: PpoConfig,
    pub eval: EvalSpec,
    pub study: StudyConfig,
    pub drift: DriftConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            run_name: String::new(),
            env: EnvConfig::default(),
            base: BasePolicyConfig::default(),
            dynamics: DynamicsConfig::default(),
            residual: ResidualConfig::default(),
            ppo: PpoConfig::default(),
            eval: EvalSpec::default(),
            study: StudyConfig::default(),
            drift: DriftConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.base.validate()?;
        self.dynamics.validate()?;
        self.residual.validate()?;
        self.ppo.validate()?;
        if self.eval.episodes == 0 {
            return Err(KorrError::Config("eval.episodes must be at least 1".into()));
        }
        self.study.validate()?;
        self.drift.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| KorrError::Config(format!("cannot serialize config: {e}")))
    }
}

fn defaults_table() -> Result<Table> {
    let mut d = ExperimentConfig::default();
    if let Some(root) = std::env::var_os(OUTPUT_ROOT_VAR) {
        d.output_dir = PathBuf::from(root);
    }
    Table::try_from(&d).map_err(|e| KorrError::Config(format!("cannot serialize defaults: {e}")))
}

/// Tables holding a `kind` tag are enum payloads whose keys depend on the
/// variant, so their contents are not checked against the defaults.
fn is_tagged(t: &Table) -> bool {
    t.contains_key("kind")
}

fn check_keys(reference: &Table, given: &Table, prefix: &str) -> Result<()> {
    for (k, v) in given {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match reference.get(k) {
            None => return Err(KorrError::Config(format!("unknown key `{path}`"))),
            Some(Value::Table(r)) if !is_tagged(r) => match v {
                Value::Table(g) => check_keys(r, g, &path)?,
                _ => return Err(KorrError::Config(format!("`{path}` must be a table"))),
            },
            Some(_) => {}
        }
    }
    Ok(())
}

fn merge(into: &mut Table, from: Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(Value::Table(a)), Value::Table(b)) => merge(a, b),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn override_table(assignment: &str) -> Result<Table> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| KorrError::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(KorrError::Config(format!("override key `{key}` is malformed")));
    }
    let mut value = parse_value(raw.trim());
    for part in parts.iter().rev() {
        let mut t = Table::new();
        t.insert(part.to_string(), value);
        value = Value::Table(t);
    }
    match value {
        Value::Table(t) => Ok(t),
        _ => unreachable!("wrapped in at least one table"),
    }
}

/// Resolves defaults < `file` < `overrides` and validates the result.
pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let reference = defaults_table()?;
    let mut merged = reference.clone();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| KorrError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let t: Table = text
            .parse()
            .map_err(|e| KorrError::Config(format!("{}: {e}", path.display())))?;
        check_keys(&reference, &t, "")?;
        merge(&mut merged, t);
    }
    for o in overrides {
        let t = override_table(o)?;
        check_keys(&reference, &t, "")?;
        merge(&mut merged, t);
    }
    let de = Value::Table(merged);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        KorrError::Config(format!("`{path}`: {}", e.into_inner()))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nothing_given_means_defaults() {
        let cfg = resolve(None, &[]).unwrap();
        let mut d = ExperimentConfig::default();
        d.output_dir = cfg.output_dir.clone();
        assert_eq!(cfg, d);
    }

    #[test]
    fn empty_file_means_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "").unwrap();
        assert_eq!(resolve(Some(&p), &[]).unwrap(), resolve(None, &[]).unwrap());
    }

    #[test]
    fn override_changes_one_field() {
        let cfg = resolve(None, &["ppo.gamma=0.9".into()]).unwrap();
        assert_eq!(cfg.ppo.gamma, 0.9);
        let mut expect = resolve(None, &[]).unwrap();
        expect.ppo.gamma = 0.9;
        assert_eq!(cfg, expect);
    }

    #[test]
    fn later_layers_win() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 5\n[ppo]\niterations = 3\nnum_envs = 4\n").unwrap();
        let cfg = resolve(Some(&p), &["ppo.iterations=7".into()]).unwrap();
        assert_eq!((cfg.seed, cfg.ppo.iterations, cfg.ppo.num_envs), (5, 7, 4));
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = resolve(None, &["ppo.gama=0.9".into()]).unwrap_err().to_string();
        assert!(err.contains("ppo.gama"), "{err}");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[residual]\nmdoe = \"korr\"\n").unwrap();
        let err = resolve(Some(&p), &[]).unwrap_err().to_string();
        assert!(err.contains("residual.mdoe"), "{err}");
    }

    #[test]
    fn type_mismatches_name_the_path() {
        let err = resolve(None, &["ppo.num_envs=\"many\"".into()]).unwrap_err().to_string();
        assert!(err.contains("ppo.num_envs"), "{err}");
    }

    #[test]
    fn constraint_violations_are_config_errors() {
        let err = resolve(None, &["ppo.gamma=1.5".into()]).unwrap_err();
        assert!(matches!(err, KorrError::Config(_)), "{err}");
    }

    #[test]
    fn enum_payloads_accept_variant_fields() {
        let cfg = resolve(
            None,
            &["study.target={kind=\"polynomial\", coefficients=[1.0, 2.0]}".into()],
        )
        .unwrap();
        assert_eq!(
            cfg.study.target,
            korr::extrapolation::Target::Polynomial {
                coefficients: vec![1.0, 2.0]
            }
        );
    }

    #[test]
    fn resolved_config_round_trips_through_toml() {
        let cfg = resolve(None, &["residual.mode=\"resip\"".into(), "eval.episodes=9".into()]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("resolved.toml");
        std::fs::write(&p, cfg.to_toml().unwrap()).unwrap();
        assert_eq!(resolve(Some(&p), &[]).unwrap(), cfg);
    }
}
