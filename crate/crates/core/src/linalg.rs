//! Small dense helpers on top of nalgebra for the r×r blocks used everywhere.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// Replaces `m` with `(m + mᵀ) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone())
}

/// Inverse of an SPD matrix together with `log det` of the input.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<(DMatrix<f64>, f64)> {
    let chol = cholesky(m)?;
    let log_det = chol_log_det(&chol);
    let mut inv = chol.inverse();
    symmetrize(&mut inv);
    Some((inv, log_det))
}

pub fn chol_log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

pub fn diag(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_diagonal(v)
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let mut s = m.clone();
    symmetrize(&mut s);
    s.symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).amax()
}

/// Symmetric within `1e-10` (relative to scale) and PSD up to `-1e-10 · trace`.
pub fn is_sym_psd(m: &DMatrix<f64>) -> bool {
    let scale = m.amax().max(1.0);
    if max_asymmetry(m) > 1e-10 * scale {
        return false;
    }
    let trace = m.trace().abs();
    min_eigenvalue(m) >= -1e-10 * trace.max(f64::MIN_POSITIVE)
}

/// `‖a − b‖_F / ‖b‖_F`, falling back to the absolute error when `b` is zero.
pub fn rel_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let diff = (a - b).norm();
    let denom = b.norm();
    if denom > 0.0 {
        diff / denom
    } else {
        diff
    }
}
