//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Default dimension cap for operations that materialize dense `d x d`
/// matrices purely for auditing (densify, spectral radii, oracles).
pub const DEFAULT_AUDIT_DIM: usize = 2048;

/// Symmetrize in place: `P <- (P + P^T)/2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let mt = m.transpose();
    *m += mt;
    *m *= 0.5;
}

pub fn symmetrized(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    symmetrize(&mut out);
    out
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let mut ev: Vec<f64> = symmetrized(m).symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).first().copied().unwrap_or(0.0)
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).last().copied().unwrap_or(0.0)
}

/// Spectral radius of a general square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    // Bounded Schur iteration: the unbounded variant can cycle forever on
    // near-defective matrices. Fall back to a power-iteration growth-rate
    // estimate if it fails to converge.
    if let Some(schur) = m.clone().try_schur(f64::EPSILON, 50_000) {
        return schur
            .complex_eigenvalues()
            .iter()
            .map(|c| c.norm())
            .fold(0.0, f64::max);
    }
    let n = m.nrows();
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut rho = 0.0;
    for _ in 0..200 {
        let w = m * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        rho = norm;
        v = w / norm;
    }
    rho
}

/// Operator 2-norm via the symmetric eigenproblem on `M^T M`.
pub fn operator_norm(m: &DMatrix<f64>) -> f64 {
    let gram = m.transpose() * m;
    max_eigenvalue(&gram).max(0.0).sqrt()
}

/// Check symmetry and positive definiteness with an explicit eigenvalue floor.
pub fn require_pd(m: &DMatrix<f64>, context: &'static str, floor: f64) -> Result<()> {
    require_square(m, context)?;
    let min = min_eigenvalue(m);
    if min < floor {
        return Err(Error::NotPositiveDefinite {
            context,
            min_eigenvalue: min,
        });
    }
    Ok(())
}

/// Check symmetry and positive semidefiniteness up to a small tolerance.
pub fn require_psd(m: &DMatrix<f64>, context: &'static str) -> Result<()> {
    require_square(m, context)?;
    let min = min_eigenvalue(m);
    let scale = max_eigenvalue(m).abs().max(1.0);
    if min < -1e-10 * scale {
        return Err(Error::NotPositiveSemidefinite {
            context,
            min_eigenvalue: min,
        });
    }
    Ok(())
}

pub fn require_square(m: &DMatrix<f64>, context: &'static str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::dims(
            context,
            "square matrix",
            format!("{}x{}", m.nrows(), m.ncols()),
        ));
    }
    Ok(())
}

/// Invert a symmetric PD matrix through its eigendecomposition, failing with
/// a named minimum eigenvalue when the condition number blows up.
pub fn pd_inverse(m: &DMatrix<f64>, context: &'static str, max_condition: f64) -> Result<DMatrix<f64>> {
    require_square(m, context)?;
    let eig = symmetrized(m).symmetric_eigen();
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let max = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if min <= 0.0 || condition > max_condition {
        return Err(Error::NumericallySingular {
            context,
            min_eigenvalue: min,
            condition,
        });
    }
    let inv_diag = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l));
    Ok(&eig.eigenvectors * inv_diag * eig.eigenvectors.transpose())
}

/// Symmetric PSD square root (eigenvalues clamped at zero).
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrized(m).symmetric_eigen();
    let sq = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * sq * eig.eigenvectors.transpose()
}

/// Numerical rank against a relative singular-value threshold.
pub fn rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    let svd = m.clone().svd(false, false);
    let max = svd
        .singular_values
        .iter()
        .copied()
        .fold(0.0_f64, f64::max);
    if max == 0.0 {
        return 0;
    }
    svd.singular_values.iter().filter(|&&s| s > rel_tol * max).count()
}

/// Kronecker product `A (x) B`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (am, an) = a.shape();
    let (bm, bn) = b.shape();
    let mut out = DMatrix::zeros(am * bm, an * bn);
    for i in 0..am {
        for j in 0..an {
            let scaled = b * a[(i, j)];
            out.view_mut((i * bm, j * bn), (bm, bn)).copy_from(&scaled);
        }
    }
    out
}

pub fn is_identity(m: &DMatrix<f64>, tol: f64) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    m.row_iter().enumerate().all(|(i, row)| {
        row.iter()
            .enumerate()
            .all(|(j, &v)| (v - if i == j { 1.0 } else { 0.0 }).abs() <= tol)
    })
}

/// Returns `Some(q)` when `M` is numerically `q * I`.
pub fn isotropic_scale(m: &DMatrix<f64>, tol: f64) -> Option<f64> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return None;
    }
    let q = m[(0, 0)];
    let scale = q.abs().max(1.0);
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let want = if i == j { q } else { 0.0 };
            if (m[(i, j)] - want).abs() > tol * scale {
                return None;
            }
        }
    }
    Some(q)
}

pub fn all_finite_vec(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub fn all_finite_mat(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

/// Least-squares line fit `y ~ a + b x`, returning `(intercept, slope, r2)`.
pub fn line_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let e = y - (intercept + slope * x);
            e * e
        })
        .sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    (intercept, slope, r2)
}
