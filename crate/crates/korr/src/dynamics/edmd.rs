//! Closed-form least-squares fit of the latent operator.

use super::KoopmanModel;
use crate::error::{contract_err, dim_err, Result};
use crate::numeric::linalg::cholesky_solve;
use crate::numeric::{gemm, Matrix};

/// Tikhonov term added to the regressor Gram matrix.
pub const EDMD_RIDGE: f64 = 1e-8;

/// Solves `min ||Z' - Z A^T - U B^T||^2` over stacked regressors `[z, u]`
/// through ridge-regularized normal equations.
///
/// Rows of `z`, `u`, `z_next` are samples. Returns `(A, B)`.
pub fn edmd_fit(z: &Matrix, u: &Matrix, z_next: &Matrix) -> Result<(Matrix, Matrix)> {
    let (n, m) = z.shape();
    let k = u.cols();
    if u.rows() != n || z_next.shape() != (n, m) {
        return Err(dim_err!(
            "EDMD data {:?}, {:?}, {:?} are not aligned",
            z.shape(),
            u.shape(),
            z_next.shape()
        ));
    }
    if n < m + k {
        return Err(contract_err!("EDMD needs at least {} transitions, got {}", m + k, n));
    }
    let w = z.hcat(u)?;
    let mut gram = Matrix::zeros(m + k, m + k);
    gemm(1.0, &w, true, &w, false, 0.0, &mut gram);
    let mut rhs = Matrix::zeros(m + k, m);
    gemm(1.0, &w, true, z_next, false, 0.0, &mut rhs);
    // theta is (m + k) x m and equals [A B]^T
    let theta = cholesky_solve(&gram, &rhs, EDMD_RIDGE)?;
    let mut a = Matrix::zeros(m, m);
    let mut b = Matrix::zeros(m, k);
    for i in 0..m {
        for j in 0..m {
            a.set(i, j, theta.get(j, i));
        }
        for j in 0..k {
            b.set(i, j, theta.get(m + j, i));
        }
    }
    Ok((a, b))
}

impl KoopmanModel {
    /// Replaces `A` and `B` by the least-squares optimum for the current lift.
    pub fn fit_operator(&mut self, x: &Matrix, u: &Matrix, x_next: &Matrix) -> Result<()> {
        let z = self.lift_batch(x)?;
        let zn = self.lift_batch(x_next)?;
        let (a, b) = edmd_fit(&z, u, &zn)?;
        self.transition = a;
        self.input = b;
        Ok(())
    }
}
