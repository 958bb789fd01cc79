//! Clipped surrogate, value and entropy terms with their gradients.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::numeric::Matrix;
use crate::residual::{gaussian_entropy, gaussian_log_prob};

/// Loss terms averaged over a minibatch. `objective = clip - c1 * value +
/// c2 * entropy` is maximized; optimizers descend `-objective`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub clip: f64,
    pub value: f64,
    pub entropy: f64,
    pub objective: f64,
    /// Fraction of samples whose ratio left `[1 - eps, 1 + eps]`.
    pub clip_fraction: f64,
}

/// Gradients of `-objective` with respect to the network outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads {
    pub d_mean: Matrix,
    pub d_logstd: Vec<f64>,
    pub d_value: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossCoefficients {
    pub clip_eps: f64,
    pub c1: f64,
    pub c2: f64,
}

/// Samples, frozen behaviour log-probabilities and GAE targets for one
/// minibatch.
#[derive(Debug, Clone, Copy)]
pub struct LossTargets<'a> {
    pub actions: &'a Matrix,
    pub logp_old: &'a [f64],
    pub advantages: &'a [f64],
    pub returns: &'a [f64],
}

/// Importance ratios `exp(log pi - log pi_old)`.
pub fn ratios(mean: &Matrix, logstd: &[f64], targets: &LossTargets<'_>) -> Vec<f64> {
    (0..mean.rows())
        .map(|i| (gaussian_log_prob(targets.actions.row(i), mean.row(i), logstd) - targets.logp_old[i]).exp())
        .collect()
}

pub fn ppo_losses(
    mean: &Matrix,
    value: &[f64],
    logstd: &[f64],
    targets: &LossTargets<'_>,
    coef: &LossCoefficients,
) -> Result<(LossTerms, LossGrads)> {
    let n = mean.rows();
    let k = mean.cols();
    if value.len() != n
        || targets.actions.shape() != (n, k)
        || targets.logp_old.len() != n
        || targets.advantages.len() != n
        || targets.returns.len() != n
        || logstd.len() != k
    {
        return Err(dim_err!("PPO minibatch arrays disagree in length (batch {})", n));
    }
    let inv_n = 1.0 / n.max(1) as f64;
    let ratio = ratios(mean, logstd, targets);
    let var: Vec<f64> = logstd.iter().map(|ls| (2.0 * ls).exp()).collect();
    let (lo, hi) = (1.0 - coef.clip_eps, 1.0 + coef.clip_eps);
    let mut clip = 0.0;
    let mut clipped = 0usize;
    let mut d_mean = Matrix::zeros(n, k);
    let mut d_logstd = vec![0.0; k];
    for i in 0..n {
        let (r, adv) = (ratio[i], targets.advantages[i]);
        let unclipped = r * adv;
        let bounded = r.clamp(lo, hi) * adv;
        clip += unclipped.min(bounded);
        if r < lo || r > hi {
            clipped += 1;
        }
        // The gradient flows through the ratio unless the clipped branch is
        // the strict minimum (the ratio is then outside the trust region).
        let active = unclipped <= bounded;
        if active {
            // d(-r A / n)/d theta = -(A r / n) * d log pi / d theta
            let w = -adv * r * inv_n;
            let a = targets.actions.row(i);
            let m = mean.row(i);
            for j in 0..k {
                let diff = a[j] - m[j];
                d_mean.row_mut(i)[j] = w * diff / var[j];
                d_logstd[j] += w * (diff * diff / var[j] - 1.0);
            }
        }
    }
    clip *= inv_n;
    let mut value_loss = 0.0;
    let mut d_value = vec![0.0; n];
    for i in 0..n {
        let e = value[i] - targets.returns[i];
        value_loss += e * e;
        d_value[i] = coef.c1 * 2.0 * e * inv_n;
    }
    value_loss *= inv_n;
    let entropy = gaussian_entropy(logstd);
    d_logstd.iter_mut().for_each(|g| *g -= coef.c2);
    let objective = clip - coef.c1 * value_loss + coef.c2 * entropy;
    Ok((
        LossTerms {
            clip,
            value: value_loss,
            entropy,
            objective,
            clip_fraction: clipped as f64 * inv_n,
        },
        LossGrads {
            d_mean,
            d_logstd,
            d_value,
        },
    ))
}

/// Exact `KL(old || new)` between diagonal Gaussians, averaged over rows.
pub fn gaussian_kl(mean_old: &Matrix, logstd_old: &[f64], mean_new: &Matrix, logstd_new: &[f64]) -> f64 {
    let n = mean_old.rows();
    if n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..mean_old.cols() {
            let (lo, ln) = (logstd_old[j], logstd_new[j]);
            let d = mean_old.get(i, j) - mean_new.get(i, j);
            total += ln - lo + ((2.0 * lo).exp() + d * d) / (2.0 * (2.0 * ln).exp()) - 0.5;
        }
    }
    total / n as f64
}
