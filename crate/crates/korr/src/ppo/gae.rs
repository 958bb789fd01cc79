//! Generalized advantage estimation.

use crate::error::{dim_err, Result};

/// Backward recursion `A_t = delta_t + gamma * lambda * (1 - done_t) * A_{t+1}`
/// with `delta_t = r_t + gamma * (1 - done_t) * V_{t+1} - V_t`.
///
/// `last_value` bootstraps the step after the final one and is ignored when
/// the final step is terminal. Returns `(advantages, returns)` with
/// `returns = advantages + values`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(dim_err!(
            "GAE inputs have lengths {} rewards, {} values, {} dones",
            n,
            values.len(),
            dones.len()
        ));
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = last_value;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * live * next_value - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Rescales to zero mean and unit standard deviation.
pub fn normalize_advantages(adv: &[f64]) -> Vec<f64> {
    if adv.is_empty() {
        return Vec::new();
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    adv.iter().map(|a| (a - mean) / (std + 1e-8)).collect()
}
