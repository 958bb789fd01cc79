//! Central finite-difference gradient verification.

use crate::error::{dim_err, numeric_err, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Denominator floor, so coordinates whose true gradient is ~0 are judged
    /// by absolute error instead of blowing up the ratio.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub relative_errors: Vec<f64>,
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub passed: bool,
}

/// Compares `analytic` against central differences of `loss_fn` around
/// `params`, one coordinate at a time.
pub fn grad_check<F>(
    mut loss_fn: F,
    params: &[f64],
    analytic: &[f64],
    config: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if params.len() != analytic.len() {
        return Err(dim_err!(
            "{} parameters but {} analytic gradient entries",
            params.len(),
            analytic.len()
        ));
    }
    let mut probe = params.to_vec();
    let mut relative_errors = Vec::with_capacity(params.len());
    let (mut worst, mut worst_index) = (0.0_f64, 0);
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + config.step;
        let plus = loss_fn(&probe);
        probe[i] = orig - config.step;
        let minus = loss_fn(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(numeric_err!("loss is not finite around coordinate {}", i));
        }
        let numeric = (plus - minus) / (2.0 * config.step);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(config.floor);
        let rel = (a - numeric).abs() / denom;
        if rel > worst {
            worst = rel;
            worst_index = i;
        }
        relative_errors.push(rel);
    }
    Ok(GradCheckReport {
        relative_errors,
        max_relative_error: worst,
        worst_index,
        passed: worst < config.tolerance,
    })
}
