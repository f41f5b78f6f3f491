//! C ABI over the filtering core.
//!
//! Conventions (mirrored in `include/kalman_learn.h`):
//! - Every fallible function returns an `int32_t` status code (`KL_OK` = 0).
//!   On failure a human-readable message is stored thread-locally and can be
//!   fetched with `kl_last_error`.
//! - Matrices cross the boundary as row-major `double` buffers with caller-
//!   owned storage; the library never retains a pointer past the call.
//! - `kl_filter` is an opaque handle created by `kl_filter_new` and released
//!   by `kl_filter_free`. Handles are not thread-safe; confine each to one
//!   thread or add external synchronization.
//! - Rust panics are caught at the boundary and reported as `KL_ERR_PANIC`
//!   instead of unwinding into the caller.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use kalman_learn::covariance;
use kalman_learn::error::Error;
use kalman_learn::filter::{self, Belief};
use kalman_learn::linalg;
use kalman_learn::model::{make_linear_gaussian, StateSpaceModel};
use nalgebra::{DMatrix, DVector};

pub const KL_OK: i32 = 0;
/// A required pointer argument was null.
pub const KL_ERR_NULL_POINTER: i32 = 1;
/// Invalid argument: bad dimensions, non-PD noise, rejected config.
pub const KL_ERR_INVALID: i32 = 2;
/// Numerical failure: singular system, non-finite values, rank deficiency.
pub const KL_ERR_NUMERIC: i32 = 3;
/// A panic was caught at the FFI boundary (library bug; state may be stale).
pub const KL_ERR_PANIC: i32 = 4;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn code_for(e: &Error) -> i32 {
    match e {
        Error::DimensionMismatch { .. }
        | Error::InvalidArgument { .. }
        | Error::Config(_)
        | Error::Io { .. }
        | Error::AuditThresholdExceeded { .. } => KL_ERR_INVALID,
        _ => KL_ERR_NUMERIC,
    }
}

fn fail(e: &Error) -> i32 {
    set_error(&e.to_string());
    code_for(e)
}

/// Run `body` with panic containment; the closure returns a status code.
fn guarded(body: impl FnOnce() -> i32) -> i32 {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(code) => code,
        Err(_) => {
            set_error("panic caught at FFI boundary");
            KL_ERR_PANIC
        }
    }
}

/// Read a row-major `rows x cols` matrix from a raw buffer.
///
/// # Safety
/// `ptr` must point to at least `rows * cols` readable doubles.
unsafe fn matrix_in(ptr: *const f64, rows: usize, cols: usize) -> Option<DMatrix<f64>> {
    if ptr.is_null() {
        return None;
    }
    let slice = std::slice::from_raw_parts(ptr, rows * cols);
    Some(DMatrix::from_row_slice(rows, cols, slice))
}

/// Read a vector of `len` doubles from a raw buffer.
///
/// # Safety
/// `ptr` must point to at least `len` readable doubles.
unsafe fn vector_in(ptr: *const f64, len: usize) -> Option<DVector<f64>> {
    if ptr.is_null() {
        return None;
    }
    Some(DVector::from_column_slice(std::slice::from_raw_parts(
        ptr, len,
    )))
}

/// Write a matrix into a row-major caller buffer.
///
/// # Safety
/// `ptr` must point to at least `m.nrows() * m.ncols()` writable doubles.
unsafe fn matrix_out(m: &DMatrix<f64>, ptr: *mut f64) {
    let out = std::slice::from_raw_parts_mut(ptr, m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out[i * m.ncols() + j] = m[(i, j)];
        }
    }
}

fn null_arg(name: &str) -> i32 {
    set_error(&format!("null pointer argument: {name}"));
    KL_ERR_NULL_POINTER
}

/// Opaque linear-Gaussian Kalman filter state.
pub struct KlFilter {
    model: StateSpaceModel,
    belief: Belief,
}

/// Library version string; static storage, never freed by the caller.
#[no_mangle]
pub extern "C" fn kl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent failure on this thread. The pointer is valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn kl_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Create a linear-Gaussian filter `x' = A x + w`, `y = C x + v` with an
/// isotropic prior `N(mean0, sigma0_sq I)`.
///
/// Buffers (row-major): `a` is `d x d`, `c` is `m x d`, `q` is `d x d`,
/// `r` is `m x m`, `mean0` has `d` entries. On success `*out` owns the
/// handle; release it with `kl_filter_free`.
///
/// # Safety
/// All pointers must be valid for the documented extents.
#[no_mangle]
pub unsafe extern "C" fn kl_filter_new(
    state_dim: usize,
    obs_dim: usize,
    a: *const f64,
    c: *const f64,
    q: *const f64,
    r: *const f64,
    mean0: *const f64,
    sigma0_sq: f64,
    out: *mut *mut KlFilter,
) -> i32 {
    guarded(|| {
        if out.is_null() {
            return null_arg("out");
        }
        if state_dim == 0 || obs_dim == 0 {
            set_error("state_dim and obs_dim must be >= 1");
            return KL_ERR_INVALID;
        }
        let (Some(a), Some(c), Some(q), Some(r), Some(mean)) = (
            matrix_in(a, state_dim, state_dim),
            matrix_in(c, obs_dim, state_dim),
            matrix_in(q, state_dim, state_dim),
            matrix_in(r, obs_dim, obs_dim),
            vector_in(mean0, state_dim),
        ) else {
            return null_arg("a/c/q/r/mean0");
        };
        if !(sigma0_sq.is_finite() && sigma0_sq > 0.0) {
            set_error("sigma0_sq must be finite and > 0");
            return KL_ERR_INVALID;
        }
        match make_linear_gaussian(a, c, q, r) {
            Ok(model) => {
                let belief = Belief::isotropic(mean, sigma0_sq);
                *out = Box::into_raw(Box::new(KlFilter { model, belief }));
                KL_OK
            }
            Err(e) => fail(&e),
        }
    })
}

/// Release a filter handle. Null is a no-op; a handle must not be used after
/// being freed.
///
/// # Safety
/// `handle` must be null or a pointer returned by `kl_filter_new` that has
/// not already been freed.
#[no_mangle]
pub unsafe extern "C" fn kl_filter_free(handle: *mut KlFilter) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Advance the filter one step with observation `y` (`m` entries): predict,
/// then measurement-update. If `innovation_norm` is non-null it receives
/// `||y - C x_pred||`. On failure the belief is left unchanged.
///
/// # Safety
/// `handle` must be a live filter; `y` must hold `obs_dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn kl_filter_step(
    handle: *mut KlFilter,
    y: *const f64,
    innovation_norm: *mut f64,
) -> i32 {
    guarded(|| {
        let Some(f) = handle.as_mut() else {
            return null_arg("handle");
        };
        let Some(y) = vector_in(y, f.model.obs_dim) else {
            return null_arg("y");
        };
        match filter::step(&f.model, &f.belief, &y, None) {
            Ok((belief, record)) => {
                f.belief = belief;
                if !innovation_norm.is_null() {
                    *innovation_norm = record.innovation_norm;
                }
                KL_OK
            }
            Err(e) => fail(&e),
        }
    })
}

/// Copy the current posterior mean into `out` (`state_dim` doubles).
///
/// # Safety
/// `handle` must be a live filter; `out` must hold `state_dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn kl_filter_mean(handle: *const KlFilter, out: *mut f64) -> i32 {
    guarded(|| {
        let Some(f) = handle.as_ref() else {
            return null_arg("handle");
        };
        if out.is_null() {
            return null_arg("out");
        }
        let slice = std::slice::from_raw_parts_mut(out, f.model.state_dim);
        slice.copy_from_slice(f.belief.mean.as_slice());
        KL_OK
    })
}

/// Copy the current posterior covariance into `out` (row-major
/// `state_dim x state_dim` doubles).
///
/// # Safety
/// `handle` must be a live filter; `out` must hold `state_dim^2` doubles.
#[no_mangle]
pub unsafe extern "C" fn kl_filter_covariance(handle: *const KlFilter, out: *mut f64) -> i32 {
    guarded(|| {
        let Some(f) = handle.as_ref() else {
            return null_arg("handle");
        };
        if out.is_null() {
            return null_arg("out");
        }
        match covariance::densify(&f.belief.cov) {
            Ok(p) => {
                matrix_out(&p, out);
                KL_OK
            }
            Err(e) => fail(&e),
        }
    })
}

/// Number of measurement updates applied so far.
///
/// # Safety
/// `handle` must be a live filter; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kl_filter_step_count(handle: *const KlFilter, out: *mut u64) -> i32 {
    guarded(|| {
        let Some(f) = handle.as_ref() else {
            return null_arg("handle");
        };
        if out.is_null() {
            return null_arg("out");
        }
        *out = f.belief.step;
        KL_OK
    })
}

/// Solve the steady-state (DARE) problem for `x' = A x + w`, `y = C x + v`.
///
/// Outputs (row-major, any may be null to skip): `p_pred` is the `d x d`
/// steady-state predicted covariance, `gain` is the `d x m` steady-state
/// Kalman gain. Returns `KL_ERR_NUMERIC` when the pair is unobservable.
///
/// # Safety
/// Input buffers must match the documented extents; non-null outputs must be
/// writable for theirs.
#[no_mangle]
pub unsafe extern "C" fn kl_dare_solve(
    state_dim: usize,
    obs_dim: usize,
    a: *const f64,
    c: *const f64,
    q: *const f64,
    r: *const f64,
    tol: f64,
    max_iter: usize,
    p_pred: *mut f64,
    gain: *mut f64,
) -> i32 {
    guarded(|| {
        let (Some(a), Some(c), Some(q), Some(r)) = (
            matrix_in(a, state_dim, state_dim),
            matrix_in(c, obs_dim, state_dim),
            matrix_in(q, state_dim, state_dim),
            matrix_in(r, obs_dim, obs_dim),
        ) else {
            return null_arg("a/c/q/r");
        };
        match filter::dare_fixed_point(&a, &c, &q, &r, tol, max_iter) {
            Ok(sol) => {
                if !sol.observable {
                    set_error("(A, C) pair is unobservable: no unique DARE fixed point");
                    return KL_ERR_NUMERIC;
                }
                if !p_pred.is_null() {
                    matrix_out(&sol.p_pred, p_pred);
                }
                if !gain.is_null() {
                    matrix_out(&sol.gain, gain);
                }
                KL_OK
            }
            Err(e) => fail(&e),
        }
    })
}

/// Spectral radius of a square `d x d` row-major matrix.
///
/// # Safety
/// `a` must hold `d*d` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kl_spectral_radius(dim: usize, a: *const f64, out: *mut f64) -> i32 {
    guarded(|| {
        let Some(a) = matrix_in(a, dim, dim) else {
            return null_arg("a");
        };
        if out.is_null() {
            return null_arg("out");
        }
        *out = linalg::spectral_radius(&a);
        KL_OK
    })
}
