//! Fitting linear, polynomial and perceptron regressors on a bounded range
//! and measuring how their error grows beyond it.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, numeric_err, KorrError, Result};
use crate::numeric::linalg::lstsq_qr;
use crate::numeric::{Activation, Adam, AdamConfig, Matrix, MlpParams};

/// Ridge used by the polynomial normal equations.
pub const POLY_RIDGE: f64 = 1e-10;
/// Errors below this are dropped before the log-log slope regression.
pub const SLOPE_TRIM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Target {
    /// `sum_i coefficients[i] * x^i`.
    Polynomial { coefficients: Vec<f64> },
    /// `0.5 x^3 - 2 x^2 + x + sin(3 x)`.
    SinusoidTrend,
}

impl Target {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Target::Polynomial { coefficients } => horner(coefficients, x),
            Target::SinusoidTrend => 0.5 * x.powi(3) - 2.0 * x * x + x + (3.0 * x).sin(),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Target::Polynomial { coefficients } => {
                let terms: Vec<String> = coefficients
                    .iter()
                    .enumerate()
                    .map(|(i, c)| format!("{c}*x^{i}"))
                    .collect();
                format!("f(x) = {}", terms.join(" + "))
            }
            Target::SinusoidTrend => "f(x) = 0.5x^3 - 2x^2 + x + sin(3x)".to_string(),
        }
    }
}

fn horner(coefficients: &[f64], x: f64) -> f64 {
    coefficients.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpFitConfig {
    pub width: usize,
    pub depths: Vec<usize>,
    pub lr: f64,
    pub max_epochs: usize,
    /// Training stops once the train MSE changed by less than this fraction
    /// over the last `plateau_window` epochs.
    pub plateau_rel: f64,
    pub plateau_window: usize,
    pub seeds: usize,
}

impl Default for MlpFitConfig {
    fn default() -> Self {
        Self {
            width: 32,
            depths: vec![2, 4],
            lr: 1e-2,
            max_epochs: 5000,
            plateau_rel: 1e-3,
            plateau_window: 100,
            seeds: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub target: Target,
    pub train_range: (f64, f64),
    /// Open on the left: the first evaluation point lies past the training
    /// range's upper end.
    pub extrap_range: (f64, f64),
    pub n_train: usize,
    pub n_extrap: usize,
    pub poly_degree: usize,
    pub noise_std: f64,
    pub mlp: MlpFitConfig,
    pub seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            target: Target::SinusoidTrend,
            train_range: (0.0, 2.0),
            extrap_range: (2.0, 3.0),
            n_train: 40,
            n_extrap: 40,
            poly_degree: 5,
            noise_std: 0.0,
            mlp: MlpFitConfig::default(),
            seed: 0,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.train_range;
        let (c, d) = self.extrap_range;
        if !(a < b) {
            return Err(config_err!("study.train_range must be increasing, got ({a}, {b})"));
        }
        if c != b || !(d >= c) {
            return Err(config_err!(
                "study.extrap_range must start where study.train_range ends ({b}) and not decrease, got ({c}, {d})"
            ));
        }
        if self.n_train < 2 || self.n_extrap < 1 {
            return Err(config_err!("study.n_train must be at least 2 and study.n_extrap at least 1"));
        }
        if self.noise_std < 0.0 {
            return Err(config_err!("study.noise_std must be non-negative"));
        }
        if self.mlp.depths.iter().any(|&d| d == 0) || self.mlp.width == 0 {
            return Err(config_err!("study.mlp needs positive width and depths"));
        }
        Ok(())
    }

    /// Evenly spaced training inputs with optional Gaussian label noise.
    pub fn training_samples(&self) -> Samples {
        let (a, b) = self.train_range;
        let n = self.n_train;
        let xs: Vec<f64> = (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect();
        let mut ys: Vec<f64> = xs.iter().map(|&x| self.target.eval(x)).collect();
        if self.noise_std > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            let normal = Normal::new(0.0, self.noise_std).expect("validated std");
            for y in &mut ys {
                *y += normal.sample(&mut rng);
            }
        }
        Samples { xs, ys }
    }

    /// Evaluation inputs `c + (d - c) k / n` for `k = 1..=n`.
    pub fn extrapolation_points(&self) -> Vec<f64> {
        let (c, d) = self.extrap_range;
        let n = self.n_extrap;
        (1..=n).map(|k| c + (d - c) * k as f64 / n as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    Polynomial { degree: usize },
    Mlp { depth: usize, seed: u64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum FittedModel {
    /// Ascending-power coefficients.
    Poly(Vec<f64>),
    Mlp(MlpParams),
}

impl FittedModel {
    pub fn predict(&self, x: f64) -> f64 {
        match self {
            FittedModel::Poly(c) => horner(c, x),
            FittedModel::Mlp(net) => net.forward(&[x]).map(|(y, _)| y[0]).unwrap_or(f64::NAN),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub kind: ModelKind,
    pub model: FittedModel,
    pub train_mse: f64,
    pub extrap_mse: f64,
    /// `prediction - target` at each extrapolation point.
    pub extrap_errors: Vec<f64>,
}

impl FitResult {
    fn score(kind: ModelKind, model: FittedModel, samples: &Samples, target: &Target, extrap_xs: &[f64]) -> Self {
        let train_mse = samples
            .xs
            .iter()
            .zip(&samples.ys)
            .map(|(&x, &y)| (model.predict(x) - y).powi(2))
            .sum::<f64>()
            / samples.xs.len() as f64;
        let extrap_errors: Vec<f64> = extrap_xs.iter().map(|&x| model.predict(x) - target.eval(x)).collect();
        let extrap_mse = if extrap_errors.is_empty() {
            0.0
        } else {
            extrap_errors.iter().map(|e| e * e).sum::<f64>() / extrap_errors.len() as f64
        };
        Self {
            kind,
            model,
            train_mse,
            extrap_mse,
            extrap_errors,
        }
    }

    pub fn coefficients(&self) -> Option<&[f64]> {
        match &self.model {
            FittedModel::Poly(c) => Some(c),
            FittedModel::Mlp(_) => None,
        }
    }
}

fn distinct_count(xs: &[f64]) -> usize {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v.len()
}

fn vandermonde(xs: &[f64], degree: usize) -> Matrix {
    let mut m = Matrix::zeros(xs.len(), degree + 1);
    for (r, &x) in xs.iter().enumerate() {
        let mut p = 1.0;
        for c in 0..=degree {
            m.set(r, c, p);
            p *= x;
        }
    }
    m
}

/// Ordinary least squares line `a0 + a1 x`.
pub fn fit_linear_ls(samples: &Samples) -> Result<Vec<f64>> {
    if distinct_count(&samples.xs) < 2 {
        return Err(numeric_err!("a line needs at least two distinct inputs"));
    }
    lstsq_qr(&vandermonde(&samples.xs, 1), &samples.ys, 0.0)
}

/// Vandermonde least squares with ridge [`POLY_RIDGE`].
pub fn fit_poly_ls(samples: &Samples, degree: usize) -> Result<Vec<f64>> {
    if distinct_count(&samples.xs) < degree + 1 {
        return Err(numeric_err!(
            "degree {degree} needs at least {} distinct inputs",
            degree + 1
        ));
    }
    lstsq_qr(&vandermonde(&samples.xs, degree), &samples.ys, POLY_RIDGE)
}

/// Full-batch Adam regression with `depth` hidden ReLU layers.
pub fn fit_mlp(samples: &Samples, depth: usize, config: &MlpFitConfig, seed: u64) -> Result<MlpParams> {
    if samples.xs.is_empty() {
        return Err(numeric_err!("no samples to fit"));
    }
    let mut sizes = vec![1];
    sizes.extend(std::iter::repeat(config.width).take(depth));
    sizes.push(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = MlpParams::new(&sizes, Activation::Relu, &mut rng);
    let mut opt = Adam::new(AdamConfig::with_lr(config.lr));
    let n = samples.xs.len();
    let x = Matrix::from_vec(n, 1, samples.xs.clone())?;
    let mut history: Vec<f64> = Vec::with_capacity(config.max_epochs);
    for epoch in 0..config.max_epochs {
        let (pred, cache) = net.forward_batch(&x)?;
        let mut grad = Matrix::zeros(n, 1);
        let mut mse = 0.0;
        for i in 0..n {
            let e = pred.get(i, 0) - samples.ys[i];
            mse += e * e / n as f64;
            grad.set(i, 0, 2.0 * e / n as f64);
        }
        if !mse.is_finite() {
            return Err(KorrError::Training(format!(
                "perceptron regression diverged at epoch {epoch}"
            )));
        }
        history.push(mse);
        if epoch >= config.plateau_window {
            let old = history[epoch - config.plateau_window];
            if (old - mse).abs() <= config.plateau_rel * old.abs().max(f64::MIN_POSITIVE) {
                break;
            }
        }
        let (g, _) = net.backward(&cache, &grad)?;
        opt.step(&mut net, &g)?;
    }
    Ok(net)
}

/// Least-squares slope of `log|error|` against `log(x - x0)`, skipping
/// errors under [`SLOPE_TRIM`]. `None` with fewer than two usable points.
pub fn error_growth_slope(xs: &[f64], errors: &[f64], x0: f64) -> Option<f64> {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(errors)
        .filter(|(&x, e)| x > x0 && e.abs() >= SLOPE_TRIM)
        .map(|(&x, e)| ((x - x0).ln(), e.abs().ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(sxy / sxx)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpSummary {
    pub depth: usize,
    pub train_mse_mean: f64,
    pub extrap_mse_mean: f64,
    pub extrap_mse_std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub x: f64,
    pub target: f64,
    pub linear: f64,
    pub polynomial: f64,
    /// Seed-averaged prediction per perceptron depth, in config order.
    pub mlp: [f64; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyReport {
    pub target: String,
    pub config: StudyConfig,
    pub linear: FitResult,
    pub polynomial: FitResult,
    pub mlp: Vec<FitResult>,
    pub mlp_summary: Vec<MlpSummary>,
    pub linear_slope: Option<f64>,
    pub polynomial_slope: Option<f64>,
}

/// Fits every model kind and scores each over the training samples and the
/// extrapolation points.
pub fn run_study(config: &StudyConfig) -> Result<StudyReport> {
    config.validate()?;
    let samples = config.training_samples();
    let ext = config.extrapolation_points();
    let target = &config.target;
    let linear = FitResult::score(
        ModelKind::Linear,
        FittedModel::Poly(fit_linear_ls(&samples)?),
        &samples,
        target,
        &ext,
    );
    let polynomial = FitResult::score(
        ModelKind::Polynomial {
            degree: config.poly_degree,
        },
        FittedModel::Poly(fit_poly_ls(&samples, config.poly_degree)?),
        &samples,
        target,
        &ext,
    );
    let mut mlp = Vec::new();
    let mut mlp_summary = Vec::new();
    for &depth in &config.mlp.depths {
        let mut fits = Vec::new();
        for s in 0..config.mlp.seeds as u64 {
            let seed = config.seed.wrapping_add(s);
            let net = fit_mlp(&samples, depth, &config.mlp, seed)?;
            fits.push(FitResult::score(
                ModelKind::Mlp { depth, seed },
                FittedModel::Mlp(net),
                &samples,
                target,
                &ext,
            ));
        }
        let k = fits.len().max(1) as f64;
        let mean = fits.iter().map(|f| f.extrap_mse).sum::<f64>() / k;
        let var = fits.iter().map(|f| (f.extrap_mse - mean).powi(2)).sum::<f64>() / k;
        mlp_summary.push(MlpSummary {
            depth,
            train_mse_mean: fits.iter().map(|f| f.train_mse).sum::<f64>() / k,
            extrap_mse_mean: mean,
            extrap_mse_std: var.sqrt(),
        });
        mlp.extend(fits);
    }
    let x0 = config.train_range.1;
    Ok(StudyReport {
        target: target.describe(),
        config: config.clone(),
        linear_slope: error_growth_slope(&ext, &linear.extrap_errors, x0),
        polynomial_slope: error_growth_slope(&ext, &polynomial.extrap_errors, x0),
        linear,
        polynomial,
        mlp,
        mlp_summary,
    })
}

impl StudyReport {
    /// Predictions over the training samples' inputs followed by the
    /// extrapolation points.
    pub fn curve(&self) -> Vec<CurveRow> {
        let samples = self.config.training_samples();
        let xs = samples.xs.iter().copied().chain(self.config.extrapolation_points());
        let depths = &self.config.mlp.depths;
        xs.map(|x| {
            let mut mlp = [f64::NAN; 2];
            for (slot, depth) in mlp.iter_mut().zip(depths) {
                let preds: Vec<f64> = self
                    .mlp
                    .iter()
                    .filter(|f| matches!(f.kind, ModelKind::Mlp { depth: d, .. } if d == *depth))
                    .map(|f| f.model.predict(x))
                    .collect();
                if !preds.is_empty() {
                    *slot = preds.iter().sum::<f64>() / preds.len() as f64;
                }
            }
            CurveRow {
                x,
                target: self.config.target.eval(x),
                linear: self.linear.model.predict(x),
                polynomial: self.polynomial.model.predict(x),
                mlp,
            }
        })
        .collect()
    }

    /// Whitespace-separated columns with a commented header naming the target.
    pub fn write_curve(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let depths = &self.config.mlp.depths;
        let names: Vec<String> = (0..2)
            .map(|i| match depths.get(i) {
                Some(d) => format!("mlp{d}_pred"),
                None => format!("mlp_unused{i}"),
            })
            .collect();
        writeln!(f, "# {}", self.target)?;
        writeln!(f, "x target lin_pred poly_pred {} {}", names[0], names[1])?;
        for r in self.curve() {
            writeln!(
                f,
                "{} {} {} {} {} {}",
                r.x, r.target, r.linear, r.polynomial, r.mlp[0], r.mlp[1]
            )?;
        }
        Ok(())
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "target": self.target,
            "linear": {"train_mse": self.linear.train_mse, "extrap_mse": self.linear.extrap_mse, "slope": self.linear_slope},
            "polynomial": {"degree": self.config.poly_degree, "train_mse": self.polynomial.train_mse, "extrap_mse": self.polynomial.extrap_mse, "slope": self.polynomial_slope},
            "mlp": self.mlp_summary,
        })
    }
}
