use serde::{Deserialize, Serialize};

use super::Matrix;

/// Per-feature affine standardization `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Fits mean and standard deviation per column; features whose spread
    /// is below `min_std` keep unit scale.
    pub fn fit<R: AsRef<[f64]>>(samples: &[R], min_std: f64) -> Self {
        let dim = samples.first().map_or(0, |s| s.as_ref().len());
        let n = samples.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for s in samples {
            mean.iter_mut().zip(s.as_ref()).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; dim];
        for s in samples {
            var.iter_mut()
                .zip(s.as_ref())
                .zip(&mean)
                .for_each(|((acc, v), m)| *acc += (v - m) * (v - m) / n);
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = v.sqrt();
                if s < min_std {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| v * s + m)
            .collect()
    }

    /// Normalizes a batch of rows into a matrix.
    pub fn apply_rows<R: AsRef<[f64]>>(&self, rows: &[R]) -> Matrix {
        let mut out = Matrix::zeros(rows.len(), self.dim());
        for (i, r) in rows.iter().enumerate() {
            let n = self.apply(r.as_ref());
            out.row_mut(i).copy_from_slice(&n);
        }
        out
    }
}
