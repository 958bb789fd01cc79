use serde::{Deserialize, Serialize};

use super::Parameters;
use crate::error::{dim_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; 0 gives plain Adam.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Adam with bias-corrected moments. Moment buffers are allocated on the
/// first step and must keep the same shapes afterwards.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step_count: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn step<P: Parameters + ?Sized>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let g = grads.slices();
        let shapes: Vec<usize> = g.iter().map(|s| s.len()).collect();
        if self.first_moment.is_empty() {
            self.first_moment = shapes.iter().map(|&n| vec![0.0; n]).collect();
            self.second_moment = self.first_moment.clone();
        } else if self.first_moment.len() != shapes.len()
            || self.first_moment.iter().zip(&shapes).any(|(m, &n)| m.len() != n)
        {
            return Err(dim_err!("gradient shapes changed between Adam steps"));
        }
        let mut p = params.slices_mut();
        if p.len() != g.len() || p.iter().zip(&g).any(|(a, b)| a.len() != b.len()) {
            return Err(dim_err!("parameter and gradient shapes differ"));
        }
        self.step_count += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, (ps, gs)) in p.iter_mut().zip(&g).enumerate() {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for j in 0..ps.len() {
                let gj = gs[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let mut update = mhat / (vhat.sqrt() + eps);
                if weight_decay != 0.0 {
                    update += weight_decay * ps[j];
                }
                ps[j] -= lr * update;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = vec![1.0, -2.0, 3.5];
        let g = vec![0.0; 3];
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..10 {
            adam.step(&mut p, &g).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 3.5]);
        assert_eq!(adam.step_count(), 10);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![1.0];
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        adam.step(&mut p, &vec![1.0]).unwrap();
        // bias-corrected m/sqrt(v) = 1 up to eps
        assert!((p[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn quadratic_loss_decreases_over_every_window() {
        // f(p) = sum_i c_i (p_i - t_i)^2
        let c = [1.0, 10.0, 0.1];
        let t = [0.5, -1.0, 2.0];
        let loss = |p: &[f64]| -> f64 { (0..3).map(|i| c[i] * (p[i] - t[i]).powi(2)).sum() };
        let mut p = vec![3.0, 2.0, -1.0];
        let mut adam = Adam::new(AdamConfig::with_lr(0.05));
        let mut history = vec![loss(&p)];
        for _ in 0..100 {
            let g: Vec<f64> = (0..3).map(|i| 2.0 * c[i] * (p[i] - t[i])).collect();
            adam.step(&mut p, &g).unwrap();
            history.push(loss(&p));
        }
        for w in 0..history.len() - 10 {
            assert!(history[w + 10] < history[w], "window at {w} did not decrease");
        }
    }

    #[test]
    fn shape_change_is_rejected() {
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut vec![1.0, 2.0], &vec![0.1, 0.1]).unwrap();
        assert!(adam.step(&mut vec![1.0], &vec![0.1]).is_err());
    }
}
