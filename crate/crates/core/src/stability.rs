//! Stability diagnostics for the filtering recursion: contraction identity,
//! persistent excitation, Lyapunov traces, the mean-square error recursion,
//! the strongly-convex convergence audit, and low-rank robustness margins.

use nalgebra::{DMatrix, DVector};

use crate::covariance::{self, CovarianceRepr};
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng;

/// Per-run stability summary; serialized through the metrics exporter.
#[derive(Clone, Debug, Default)]
pub struct StabilityReport {
    pub contraction_spectral_radius: Vec<f64>,
    pub identity_residual: Vec<f64>,
    pub excitation: Vec<(f64, f64)>,
    pub lyapunov: Vec<f64>,
    pub notes: Vec<String>,
}

/// Cross-check the two forms of the posterior contraction matrix:
/// `I - K H` and `(I + P H^T R^{-1} H)^{-1}` (matrix inversion lemma).
///
/// Returns the spectral radius of `I - K H` and the Frobenius residual
/// between the two forms.
pub fn contraction_check(
    p_pred: &DMatrix<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(f64, f64)> {
    let d = p_pred.nrows();
    let g = covariance::gain(&CovarianceRepr::dense(p_pred.clone()), h, r)?;
    let m1 = g
        .contraction
        .ok_or_else(|| Error::invalid("contraction_check", "audit-scale dims required"))?;

    let r_inv = linalg::pd_inverse(r, "contraction_check (R)", 1e14)?;
    let inner = DMatrix::identity(d, d) + p_pred * h.transpose() * r_inv * h;
    let m2 = inner
        .try_inverse()
        .ok_or_else(|| Error::invalid("contraction_check", "I + P H^T R^{-1} H not invertible"))?;

    Ok((linalg::spectral_radius(&m1), (&m1 - m2).norm()))
}

/// Windowed excitation bounds: for consecutive windows of length `n`,
/// the extreme eigenvalues `(alpha_hat, beta_hat)` of
/// `sum_k H_k^T R^{-1} H_k`.
pub fn excitation_window(
    h_seq: &[DMatrix<f64>],
    r: &DMatrix<f64>,
    n: usize,
) -> Result<Vec<(f64, f64)>> {
    if n == 0 {
        return Err(Error::invalid("excitation_window", "window length must be positive"));
    }
    let r_inv = linalg::pd_inverse(r, "excitation_window (R)", 1e14)?;
    let mut out = Vec::new();
    for window in h_seq.chunks_exact(n) {
        let d = window[0].ncols();
        let mut sum = DMatrix::zeros(d, d);
        for h in window {
            sum += h.transpose() * &r_inv * h;
        }
        linalg::symmetrize(&mut sum);
        out.push((linalg::min_eigenvalue(&sum), linalg::max_eigenvalue(&sum)));
    }
    Ok(out)
}

/// Error/Lyapunov trace of a run against a known target.
#[derive(Clone, Debug)]
pub struct ErrorTrace {
    /// `||theta_t - theta_star||` per step.
    pub error_norms: Vec<f64>,
    /// `V_t = e_t^T P_t^{-1} e_t` per step.
    pub lyapunov: Vec<f64>,
    /// Fitted per-step contraction rate from `log ||e_t||`.
    pub lambda_hat: f64,
    /// Coefficient of determination of the log-linear fit.
    pub r2: f64,
    /// Steps where `V_{t+1} - V_t` exceeds the slack bound.
    pub lyapunov_violations: Vec<usize>,
}

/// Compute error norms, Lyapunov values, and a fitted contraction rate from
/// a sequence of posterior means and covariances. `slack` bounds the allowed
/// per-step Lyapunov increase (noise budget); steps above it are flagged.
pub fn error_trace(
    means: &[DVector<f64>],
    covs: &[CovarianceRepr],
    theta_star: &DVector<f64>,
    slack: f64,
) -> Result<ErrorTrace> {
    if means.len() != covs.len() {
        return Err(Error::dims(
            "error_trace",
            format!("{}", means.len()),
            format!("{}", covs.len()),
        ));
    }
    let mut error_norms = Vec::with_capacity(means.len());
    let mut lyapunov = Vec::with_capacity(means.len());
    for (mu, p) in means.iter().zip(covs) {
        let e = mu - theta_star;
        error_norms.push(e.norm());
        lyapunov.push(e.dot(&p.apply_inv(&e)?));
    }
    let mut violations = Vec::new();
    for t in 1..lyapunov.len() {
        if lyapunov[t] - lyapunov[t - 1] > slack {
            violations.push(t);
        }
    }
    // least-squares fit of log ||e_t|| against t over strictly positive norms
    let pts: Vec<(f64, f64)> = error_norms
        .iter()
        .enumerate()
        .filter(|(_, &e)| e > 1e-300)
        .map(|(t, &e)| (t as f64, e.ln()))
        .collect();
    let (lambda_hat, r2) = if pts.len() >= 2 {
        let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
        let (_, slope, r2) = linalg::line_fit(&xs, &ys);
        (slope.exp(), r2)
    } else {
        (0.0, 1.0)
    };
    Ok(ErrorTrace {
        error_norms,
        lyapunov,
        lambda_hat,
        r2,
        lyapunov_violations: violations,
    })
}

/// Propagate the mean-square error recursion
/// `E_{t+1} = (I - K_t H_t) E_t (I - K_t H_t)^T + K_t R K_t^T`
/// analytically; returns `E_0..E_T`.
pub fn mean_square_recursion(
    k_seq: &[DMatrix<f64>],
    h_seq: &[DMatrix<f64>],
    r: &DMatrix<f64>,
    e0: &DMatrix<f64>,
) -> Result<Vec<DMatrix<f64>>> {
    if k_seq.len() != h_seq.len() {
        return Err(Error::dims(
            "mean_square_recursion",
            format!("{}", k_seq.len()),
            format!("{}", h_seq.len()),
        ));
    }
    let d = e0.nrows();
    let mut out = vec![linalg::symmetrized(e0)];
    for (k, h) in k_seq.iter().zip(h_seq) {
        let m = DMatrix::identity(d, d) - k * h;
        let prev = out.last().unwrap();
        let next = &m * prev * m.transpose() + k * r * k.transpose();
        out.push(linalg::symmetrized(&next));
    }
    Ok(out)
}

/// Monte Carlo estimate of the same recursion: error dynamics
/// `e_{t+1} = (I - K_t H_t) e_t - K_t v_t`, `v_t ~ N(0, R)`, averaged over
/// seeded realizations. Used as the sampling oracle for
/// [`mean_square_recursion`].
pub fn mean_square_monte_carlo(
    k_seq: &[DMatrix<f64>],
    h_seq: &[DMatrix<f64>],
    r: &DMatrix<f64>,
    e0: &DMatrix<f64>,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<DMatrix<f64>>> {
    let d = e0.nrows();
    let t_len = k_seq.len();
    let e0_sqrt = linalg::psd_sqrt(e0);
    let r_sqrt = linalg::psd_sqrt(r);
    let mut sums = vec![DMatrix::<f64>::zeros(d, d); t_len + 1];
    for i in 0..n_samples {
        let mut rng_e = rng::stream(seed, i as u64, 0);
        let mut e = rng::gaussian_with_sqrt(&mut rng_e, &e0_sqrt);
        sums[0] += &e * e.transpose();
        for (t, (k, h)) in k_seq.iter().zip(h_seq).enumerate() {
            let mut rng_v = rng::stream(seed, i as u64, 1 + t as u64);
            let v = rng::gaussian_with_sqrt(&mut rng_v, &r_sqrt);
            e = &e - k * (h * &e) - k * v;
            sums[t + 1] += &e * e.transpose();
        }
    }
    Ok(sums
        .into_iter()
        .map(|s| s / n_samples as f64)
        .collect())
}

/// Strongly convex quadratic objective `f(theta) = 1/2 (theta - theta*)^T A
/// (theta - theta*)` with its curvature bounds.
#[derive(Clone, Debug)]
pub struct QuadraticObjective {
    pub hessian: DMatrix<f64>,
    pub theta_star: DVector<f64>,
}

impl QuadraticObjective {
    pub fn new(hessian: DMatrix<f64>, theta_star: DVector<f64>) -> Result<Self> {
        linalg::require_pd(&hessian, "QuadraticObjective::new", 1e-12)?;
        if hessian.nrows() != theta_star.len() {
            return Err(Error::dims(
                "QuadraticObjective::new",
                format!("{}", hessian.nrows()),
                format!("{}", theta_star.len()),
            ));
        }
        Ok(QuadraticObjective { hessian, theta_star })
    }

    pub fn gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.hessian * (theta - &self.theta_star)
    }

    /// `(mu, L)`: extreme eigenvalues of the Hessian.
    pub fn curvature_bounds(&self) -> (f64, f64) {
        (
            linalg::min_eigenvalue(&self.hessian),
            linalg::max_eigenvalue(&self.hessian),
        )
    }
}

/// Outcome of the expected-error recursion audit.
#[derive(Clone, Debug)]
pub struct ConvergenceAudit {
    /// Empirical mean of `||theta_t - theta*||^2` per step.
    pub mean_sq_error: Vec<f64>,
    /// Per-step check of
    /// `E_{t+1} <= (1 - eta mu m) E_t + eta^2 M^2 sigma^2` within 3-sigma
    /// replicate slack.
    pub per_step_ok: Vec<bool>,
    pub first_violation: Option<usize>,
    /// Step-size condition `eta <= 2 m / (L M^2)`.
    pub step_size_ok: bool,
    /// Measured preconditioner spectral bounds `(m, M)` over the run.
    pub precond_bounds: (f64, f64),
}

/// Run preconditioned noisy gradient descent
/// `theta <- theta - eta B_t (grad + noise)`, `noise ~ N(0, sigma^2 I)`, over
/// seeded replicates and audit the expected-error recursion.
///
/// `preconditioner(t)` supplies `B_t`; its spectral bounds `(m, M)` are
/// measured from the run.
pub fn convex_convergence_audit<F>(
    objective: &QuadraticObjective,
    theta0: &DVector<f64>,
    eta: f64,
    sigma: f64,
    steps: usize,
    replicates: usize,
    seed: u64,
    mut preconditioner: F,
) -> Result<ConvergenceAudit>
where
    F: FnMut(usize) -> DMatrix<f64>,
{
    let d = theta0.len();
    if d != objective.theta_star.len() {
        return Err(Error::dims(
            "convex_convergence_audit",
            format!("{}", objective.theta_star.len()),
            format!("{d}"),
        ));
    }
    let (mu, l) = objective.curvature_bounds();

    let precond: Vec<DMatrix<f64>> = (0..steps).map(&mut preconditioner).collect();
    let mut m_low = f64::INFINITY;
    let mut m_high: f64 = 0.0;
    for b in &precond {
        m_low = m_low.min(linalg::min_eigenvalue(b));
        m_high = m_high.max(linalg::max_eigenvalue(b));
    }
    let step_size_ok = eta <= 2.0 * m_low / (l * m_high * m_high) + 1e-15;

    // replicate trajectories of squared errors
    let mut sq = vec![vec![0.0f64; replicates]; steps + 1];
    for rep in 0..replicates {
        let mut theta = theta0.clone();
        sq[0][rep] = (&theta - &objective.theta_star).norm_squared();
        for (t, b) in precond.iter().enumerate() {
            let mut grad = objective.gradient(&theta);
            if sigma > 0.0 {
                let mut noise_rng = rng::stream(seed, rep as u64, t as u64);
                grad += rng::standard_normal_vector(&mut noise_rng, d) * sigma;
            }
            theta -= b * grad * eta;
            sq[t + 1][rep] = (&theta - &objective.theta_star).norm_squared();
        }
    }

    let mean: Vec<f64> = sq
        .iter()
        .map(|row| row.iter().sum::<f64>() / replicates as f64)
        .collect();
    let sem: Vec<f64> = sq
        .iter()
        .zip(&mean)
        .map(|(row, &mu_t)| {
            if replicates < 2 {
                return 0.0;
            }
            let var = row.iter().map(|x| (x - mu_t).powi(2)).sum::<f64>()
                / (replicates - 1) as f64;
            (var / replicates as f64).sqrt()
        })
        .collect();

    let contraction = 1.0 - eta * mu * m_low;
    let noise_floor = eta * eta * m_high * m_high * sigma * sigma;
    let mut per_step_ok = Vec::with_capacity(steps);
    let mut first_violation = None;
    for t in 0..steps {
        let bound = contraction * mean[t] + noise_floor;
        let slack = 3.0 * (sem[t + 1] + contraction * sem[t]) + 1e-12;
        let ok = mean[t + 1] <= bound + slack;
        if !ok && first_violation.is_none() {
            first_violation = Some(t);
        }
        per_step_ok.push(ok);
    }

    Ok(ConvergenceAudit {
        mean_sq_error: mean,
        per_step_ok,
        first_violation,
        step_size_ok,
        precond_bounds: (m_low, m_high),
    })
}

/// Robustness margin of an approximate-covariance gain.
#[derive(Clone, Debug)]
pub struct PerturbationMargin {
    /// `||K_approx - K_exact||_F`.
    pub delta_k_norm: f64,
    /// Spectral radius of the exact contraction `I - K_exact H`.
    pub rho_exact: f64,
    /// `(1 - rho_exact) - ||Delta K . H||_2`; positive certifies preserved
    /// contraction.
    pub margin: f64,
    /// Empirical Lipschitz ratio `||Delta K|| / ||Delta P||` (`None` when
    /// the covariance perturbation is zero).
    pub lipschitz_ratio: Option<f64>,
}

/// Compare the gains produced by an exact and an approximate covariance and
/// report the sufficient-condition contraction margin.
pub fn lowrank_perturbation_margin(
    p_exact: &DMatrix<f64>,
    p_approx: &CovarianceRepr,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<PerturbationMargin> {
    let g_exact = covariance::gain(&CovarianceRepr::dense(p_exact.clone()), h, r)?;
    let g_approx = covariance::gain(p_approx, h, r)?;
    let delta_k = &g_approx.k - &g_exact.k;
    let delta_k_norm = delta_k.norm();
    let rho_exact = linalg::spectral_radius(
        g_exact
            .contraction
            .as_ref()
            .ok_or_else(|| Error::invalid("lowrank_perturbation_margin", "audit scale required"))?,
    );
    let margin = (1.0 - rho_exact) - linalg::operator_norm(&(&delta_k * h));
    let delta_p = (covariance::densify(p_approx)? - p_exact).norm();
    let lipschitz_ratio = if delta_p > 0.0 {
        Some(delta_k_norm / delta_p)
    } else {
        None
    };
    Ok(PerturbationMargin {
        delta_k_norm,
        rho_exact,
        margin,
        lipschitz_ratio,
    })
}
