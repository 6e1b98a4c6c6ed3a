//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Relative eigenvalue cutoff used when treating a symmetric matrix as singular.
pub const RANK_RTOL: f64 = 1e-12;

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
///
/// Runs a fixed number of iterations (stopping early once the Rayleigh
/// quotient moves by less than `tol`), so the result is deterministic.
pub fn lambda_max_power(m: &DMatrix<f64>, iterations: usize, tol: f64) -> f64 {
    let n = m.nrows();
    if n == 0 {
        return 0.0;
    }
    // Deterministic start with components in every direction.
    let mut v = DVector::from_fn(n, |i, _| 1.0 + (i as f64 + 1.0).sqrt() * 1e-3);
    v /= v.norm();
    let mut estimate = 0.0;
    for _ in 0..iterations {
        let w = m * &v;
        let next = v.dot(&w);
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
        if (next - estimate).abs() <= tol * next.abs().max(1.0) {
            estimate = next;
            break;
        }
        estimate = next;
    }
    // The Rayleigh quotient underestimates; ‖Mv‖ for unit v is the tighter upper
    // companion once converged. Take the max of both.
    estimate.max((m * &v).norm())
}

/// Extreme eigenvalues `(min, max)` of a symmetric matrix.
pub fn eig_extremes(m: &DMatrix<f64>) -> (f64, f64) {
    let eig = SymmetricEigen::new(m.clone());
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}

/// Moore–Penrose pseudo-inverse of a symmetric PSD matrix, plus its numerical rank.
pub fn sym_pinv(m: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let n = m.nrows();
    let eig = SymmetricEigen::new(m.clone());
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let cutoff = RANK_RTOL * scale.max(f64::MIN_POSITIVE) * n.max(1) as f64;
    let mut inv_vals = DVector::zeros(n);
    let mut rank = 0;
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        if l > cutoff {
            inv_vals[i] = 1.0 / l;
            rank += 1;
        }
    }
    let q = &eig.eigenvectors;
    let pinv = q * DMatrix::from_diagonal(&inv_vals) * q.transpose();
    (pinv, rank)
}

/// Solve `m x = b` for symmetric positive definite `m`.
///
/// Falls back to the pseudo-inverse when Cholesky fails.
pub fn spd_solve(m: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    match m.clone().cholesky() {
        Some(ch) => ch.solve(b),
        None => sym_pinv(m).0 * b,
    }
}

/// Inverse of a symmetric positive definite matrix.
pub fn spd_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    match m.clone().cholesky() {
        Some(ch) => ch.inverse(),
        None => sym_pinv(m).0,
    }
}

/// `xᵀ M x`.
pub fn quad_form(m: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(m * x))
}

/// Integer matrix power by repeated squaring.
pub fn mat_pow(m: &DMatrix<f64>, mut k: usize) -> DMatrix<f64> {
    let n = m.nrows();
    let mut result = DMatrix::identity(n, n);
    let mut base = m.clone();
    while k > 0 {
        if k & 1 == 1 {
            result = &result * &base;
        }
        base = &base * &base;
        k >>= 1;
    }
    result
}
