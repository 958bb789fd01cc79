//! Small dense solvers: Cholesky for ridge normal equations, Householder QR
//! for ill-conditioned least squares.

use super::Matrix;
use crate::error::{dim_err, numeric_err, Result};

/// Solves `(G + ridge * I) X = R` for symmetric positive (semi)definite `G`.
///
/// `rhs` may carry several right-hand-side columns.
pub fn cholesky_solve(gram: &Matrix, rhs: &Matrix, ridge: f64) -> Result<Matrix> {
    let n = gram.rows();
    if gram.cols() != n || rhs.rows() != n {
        return Err(dim_err!(
            "cholesky_solve of {:?} with rhs {:?}",
            gram.shape(),
            rhs.shape()
        ));
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut diag = gram.get(j, j) + ridge;
        for k in 0..j {
            diag -= l.get(j, k) * l.get(j, k);
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(numeric_err!(
                "regressor matrix is rank deficient beyond the ridge (pivot {} = {:e})",
                j,
                diag
            ));
        }
        let d = diag.sqrt();
        l.set(j, j, d);
        for i in j + 1..n {
            let mut s = gram.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / d);
        }
    }
    let mut x = rhs.clone();
    for c in 0..rhs.cols() {
        // forward: L y = b
        for i in 0..n {
            let mut s = x.get(i, c);
            for k in 0..i {
                s -= l.get(i, k) * x.get(k, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
        // backward: L^T x = y
        for i in (0..n).rev() {
            let mut s = x.get(i, c);
            for k in i + 1..n {
                s -= l.get(k, i) * x.get(k, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
    }
    if !x.is_finite() {
        return Err(numeric_err!("cholesky solution is not finite"));
    }
    Ok(x)
}

/// Least squares `min ||D c - y||^2 + ridge ||c||^2` via Householder QR on
/// the ridge-augmented design `[D; sqrt(ridge) I]`.
pub fn lstsq_qr(design: &Matrix, target: &[f64], ridge: f64) -> Result<Vec<f64>> {
    let (n, p) = design.shape();
    if target.len() != n {
        return Err(dim_err!(
            "design has {} rows but target has {} values",
            n,
            target.len()
        ));
    }
    let rows = n + if ridge > 0.0 { p } else { 0 };
    if rows < p {
        return Err(numeric_err!("{} equations for {} unknowns", rows, p));
    }
    let mut a = Matrix::zeros(rows, p);
    let mut b = vec![0.0; rows];
    for r in 0..n {
        a.row_mut(r).copy_from_slice(design.row(r));
        b[r] = target[r];
    }
    if ridge > 0.0 {
        let s = ridge.sqrt();
        for j in 0..p {
            a.set(n + j, j, s);
        }
    }
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    for j in 0..p {
        let mut norm = 0.0;
        for i in j..rows {
            norm += a.get(i, j) * a.get(i, j);
        }
        let norm = norm.sqrt();
        if norm <= 1e-13 * scale {
            return Err(numeric_err!(
                "design column {} is linearly dependent on the others",
                j
            ));
        }
        let alpha = if a.get(j, j) > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (j..rows).map(|i| a.get(i, j)).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        for c in j..p {
            let s: f64 = v.iter().enumerate().map(|(k, vk)| vk * a.get(j + k, c)).sum();
            let f = 2.0 * s / vnorm2;
            for (k, vk) in v.iter().enumerate() {
                let cur = a.get(j + k, c);
                a.set(j + k, c, cur - f * vk);
            }
        }
        let s: f64 = v.iter().enumerate().map(|(k, vk)| vk * b[j + k]).sum();
        let f = 2.0 * s / vnorm2;
        for (k, vk) in v.iter().enumerate() {
            b[j + k] -= f * vk;
        }
    }
    let mut coef = vec![0.0; p];
    for i in (0..p).rev() {
        let mut s = b[i];
        for k in i + 1..p {
            s -= a.get(i, k) * coef[k];
        }
        coef[i] = s / a.get(i, i);
    }
    if coef.iter().any(|c| !c.is_finite()) {
        return Err(numeric_err!("least-squares solution is not finite"));
    }
    Ok(coef)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_solves_spd_system() {
        let g = Matrix::from_rows(&[[4.0, 1.0], [1.0, 3.0]]).unwrap();
        let r = Matrix::from_rows(&[[1.0], [2.0]]).unwrap();
        let x = cholesky_solve(&g, &r, 0.0).unwrap();
        // 4x + y = 1, x + 3y = 2  ->  x = 1/11, y = 7/11
        assert!((x.get(0, 0) - 1.0 / 11.0).abs() < 1e-15);
        assert!((x.get(1, 0) - 7.0 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn cholesky_rejects_singular_without_ridge() {
        let g = Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap();
        let r = Matrix::from_rows(&[[1.0], [1.0]]).unwrap();
        assert!(cholesky_solve(&g, &r, 0.0).is_err());
        assert!(cholesky_solve(&g, &r, 1e-8).unwrap().is_finite());
    }

    #[test]
    fn qr_recovers_exact_line() {
        let d = Matrix::from_rows(&[[1.0, 0.0], [1.0, 1.0], [1.0, 2.0], [1.0, 3.0]]).unwrap();
        let y = [1.0, 3.0, 5.0, 7.0];
        let c = lstsq_qr(&d, &y, 0.0).unwrap();
        assert!((c[0] - 1.0).abs() < 1e-13 && (c[1] - 2.0).abs() < 1e-13);
    }

    #[test]
    fn qr_rejects_dependent_columns() {
        let d = Matrix::from_rows(&[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]).unwrap();
        assert!(lstsq_qr(&d, &[1.0, 2.0, 3.0], 0.0).is_err());
    }
}
