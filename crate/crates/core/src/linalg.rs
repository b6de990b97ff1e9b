//! Small dense helpers for the allocation-free inner loops.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// `out = m · x` for a column-major matrix.
#[inline]
pub(crate) fn matvec_into(m: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    let rows = m.nrows();
    out.iter_mut().for_each(|o| *o = 0.0);
    for (j, xj) in x.iter().enumerate() {
        let col = &m.as_slice()[j * rows..(j + 1) * rows];
        for (o, a) in out.iter_mut().zip(col) {
            *o += a * xj;
        }
    }
}

/// `out += m · x`.
#[inline]
pub(crate) fn matvec_add(m: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    let rows = m.nrows();
    for (j, xj) in x.iter().enumerate() {
        let col = &m.as_slice()[j * rows..(j + 1) * rows];
        for (o, a) in out.iter_mut().zip(col) {
            *o += a * xj;
        }
    }
}

/// `xᵀ m x`.
#[inline]
pub(crate) fn quad_form(m: &DMatrix<f64>, x: &[f64]) -> f64 {
    let n = m.nrows();
    let mut acc = 0.0;
    for (j, xj) in x.iter().enumerate() {
        let col = &m.as_slice()[j * n..(j + 1) * n];
        let mut s = 0.0;
        for (a, xi) in col.iter().zip(x) {
            s += a * xi;
        }
        acc += s * xj;
    }
    acc
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.amax().max(1.0);
    (0..m.nrows()).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol * scale))
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = 0.5 * (m + m.transpose());
    sym.symmetric_eigenvalues().min()
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Inverse of a symmetric positive-definite matrix via Cholesky, rejecting
/// factors whose diagonal ratio signals an ill-conditioned matrix.
pub(crate) fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Validation(format!("{what} not positive definite")))?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = (diag.min(), diag.max());
    if lo <= 0.0 || (hi / lo).powi(2) > 1e12 {
        return Err(Error::Validation(format!("{what} is ill-conditioned")));
    }
    Ok(chol.inverse())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_and_quad_form() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let mut out = [0.0; 2];
        matvec_into(&m, &[1.0, -1.0], &mut out);
        assert_eq!(out, [-1.0, -1.0]);
        matvec_add(&m, &[1.0, 0.0], &mut out);
        assert_eq!(out, [0.0, 2.0]);
        assert_eq!(quad_form(&m, &[1.0, 1.0]), 10.0);
    }

    #[test]
    fn spd_inverse_rejects_singular() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(spd_inverse(&m, "R").is_err());
        let r = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.25]);
        let inv = spd_inverse(&r, "R").unwrap();
        assert!((&r * inv - DMatrix::identity(2, 2)).amax() < 1e-12);
    }
}
