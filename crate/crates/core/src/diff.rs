//! Finite-difference linearization backend.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};

/// Counts every finite-difference Jacobian evaluation. The Koopman tests use
/// this to assert that the lifted filtering path performs no linearization.
pub static FD_JACOBIAN_CALLS: AtomicU64 = AtomicU64::new(0);

pub fn fd_call_count() -> u64 {
    FD_JACOBIAN_CALLS.load(Ordering::Relaxed)
}

/// Central-difference Jacobian of `map` at `x`.
///
/// Step size per coordinate is `cbrt(eps) * max(1, |x_i|)`, balancing
/// truncation and roundoff for central differences.
pub fn jacobian_fd<F>(map: F, x: &DVector<f64>) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    FD_JACOBIAN_CALLS.fetch_add(1, Ordering::Relaxed);
    let h_base = f64::EPSILON.cbrt();
    let n = x.len();
    let fx = map(x);
    let m = fx.len();
    let mut jac = DMatrix::zeros(m, n);
    let mut xp = x.clone();
    let mut xm = x.clone();
    for j in 0..n {
        let h = h_base * x[j].abs().max(1.0);
        xp[j] = x[j] + h;
        xm[j] = x[j] - h;
        let fp = map(&xp);
        let fm = map(&xm);
        let col = (fp - fm) / (2.0 * h);
        jac.set_column(j, &col);
        xp[j] = x[j];
        xm[j] = x[j];
    }
    jac
}

/// Central-difference gradient of a scalar function.
pub fn gradient_fd<F>(f: F, x: &DVector<f64>) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let h_base = f64::EPSILON.cbrt();
    let n = x.len();
    let mut grad = DVector::zeros(n);
    let mut xp = x.clone();
    let mut xm = x.clone();
    for j in 0..n {
        let h = h_base * x[j].abs().max(1.0);
        xp[j] = x[j] + h;
        xm[j] = x[j] - h;
        grad[j] = (f(&xp) - f(&xm)) / (2.0 * h);
        xp[j] = x[j];
        xm[j] = x[j];
    }
    grad
}
