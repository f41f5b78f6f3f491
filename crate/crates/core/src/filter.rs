//! Extended Kalman filtering over [`StateSpaceModel`]s with structured
//! covariances, plus the discrete algebraic Riccati fixed point.
//!
//! Each step is the classical predict / innovate / gain / update cycle. The
//! covariance algebra is delegated to [`crate::covariance`], so the same
//! filter code runs dense, block-diagonal, low-rank, and Kronecker beliefs.

use nalgebra::{DMatrix, DVector};

use crate::covariance::{self, CovarianceRepr};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::StateSpaceModel;

/// Filtering state: posterior mean and covariance after `step` updates.
#[derive(Clone, Debug)]
pub struct Belief {
    pub mean: DVector<f64>,
    pub cov: CovarianceRepr,
    pub step: u64,
}

impl Belief {
    pub fn new(mean: DVector<f64>, cov: CovarianceRepr) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(Error::dims(
                "Belief::new",
                format!("{}", cov.dim()),
                format!("{}", mean.len()),
            ));
        }
        Ok(Belief { mean, cov, step: 0 })
    }

    /// Isotropic prior `N(mean, sigma0^2 I)`.
    pub fn isotropic(mean: DVector<f64>, sigma0_sq: f64) -> Self {
        let d = mean.len();
        Belief {
            mean,
            cov: CovarianceRepr::isotropic(d, sigma0_sq),
            step: 0,
        }
    }
}

/// Per-step diagnostics emitted alongside the updated belief.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub step: u64,
    pub innovation: DVector<f64>,
    pub innovation_norm: f64,
    /// Normalized innovation squared `e^T S^{-1} e`.
    pub nis: f64,
    pub gain_frobenius: f64,
    pub predicted_mean_norm: f64,
    /// Spectral radius of `I - K H`, materialized at audit scale only.
    pub contraction_rho: Option<f64>,
}

/// Time update: `mu <- f(mu, u)`, `P <- A P A^T + Q` with `A` the transition
/// Jacobian at the current mean.
pub fn predict(
    model: &StateSpaceModel,
    belief: &Belief,
    input: Option<&DVector<f64>>,
) -> Result<Belief> {
    let mean = model.transition(&belief.mean, input);
    if !linalg::all_finite_vec(&mean) {
        return Err(Error::NonFinite {
            context: "predict (transition mean)",
            step: belief.step,
        });
    }
    let a = model.transition_jacobian(&belief.mean, input);
    let cov = covariance::predict_cov(&belief.cov, &a, &model.q)?;
    Ok(Belief {
        mean,
        cov,
        step: belief.step,
    })
}

/// Observation Jacobian and innovation at the predicted mean.
pub fn innovate(
    model: &StateSpaceModel,
    predicted: &Belief,
    y: &DVector<f64>,
    input: Option<&DVector<f64>>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let y_hat = model.observation(&predicted.mean, input);
    if y.len() != y_hat.len() {
        return Err(Error::dims(
            "innovate",
            format!("{}", y_hat.len()),
            format!("{}", y.len()),
        ));
    }
    let innovation = y - y_hat;
    let h = model.observation_jacobian(&predicted.mean, input);
    Ok((innovation, h))
}

/// Measurement update of a predicted belief given the innovation.
pub fn update(
    model: &StateSpaceModel,
    predicted: &Belief,
    innovation: &DVector<f64>,
    h: &DMatrix<f64>,
) -> Result<(Belief, StepRecord)> {
    let g = covariance::gain(&predicted.cov, h, &model.r)?;
    let s_inv_e = g
        .innovation_cov
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite {
            context: "update (innovation covariance)",
            min_eigenvalue: linalg::min_eigenvalue(&g.innovation_cov),
        })?
        .solve(innovation);
    let nis = innovation.dot(&s_inv_e);

    let mean = &predicted.mean + &g.k * innovation;
    if !linalg::all_finite_vec(&mean) {
        return Err(Error::NonFinite {
            context: "update (posterior mean)",
            step: predicted.step,
        });
    }
    let cov = covariance::measurement_update(&predicted.cov, &g.k, h, &model.r)?;
    let record = StepRecord {
        step: predicted.step,
        innovation_norm: innovation.norm(),
        innovation: innovation.clone(),
        nis,
        gain_frobenius: g.k.norm(),
        predicted_mean_norm: predicted.mean.norm(),
        contraction_rho: g.contraction.as_ref().map(linalg::spectral_radius),
    };
    Ok((
        Belief {
            mean,
            cov,
            step: predicted.step + 1,
        },
        record,
    ))
}

/// One full predict / innovate / gain / update cycle.
pub fn step(
    model: &StateSpaceModel,
    belief: &Belief,
    y: &DVector<f64>,
    input: Option<&DVector<f64>>,
) -> Result<(Belief, StepRecord)> {
    let predicted = predict(model, belief, input)?;
    let (innovation, h) = innovate(model, &predicted, y, input)?;
    update(model, &predicted, &innovation, &h)
}

/// Filter a full observation sequence, collecting per-step diagnostics.
pub fn run(
    model: &StateSpaceModel,
    initial: Belief,
    observations: &[DVector<f64>],
    inputs: Option<&[DVector<f64>]>,
) -> Result<(Belief, Vec<StepRecord>)> {
    if let Some(us) = inputs {
        if us.len() != observations.len() {
            return Err(Error::dims(
                "run (inputs)",
                format!("{}", observations.len()),
                format!("{}", us.len()),
            ));
        }
    }
    let mut belief = initial;
    let mut records = Vec::with_capacity(observations.len());
    for (t, y) in observations.iter().enumerate() {
        let u = inputs.map(|us| &us[t]);
        let (next, record) = step(model, &belief, y, u)?;
        belief = next;
        records.push(record);
    }
    Ok((belief, records))
}

/// Fixed point of the discrete algebraic Riccati recursion.
#[derive(Clone, Debug)]
pub struct DareSolution {
    /// Steady-state predicted covariance `P_infinity`.
    pub p_pred: DMatrix<f64>,
    /// Steady-state posterior covariance `(I - K H) P_infinity`.
    pub p_post: DMatrix<f64>,
    /// Steady-state Kalman gain.
    pub gain: DMatrix<f64>,
    pub iterations: usize,
    /// False when the observability matrix `[H; HA; ...]` is rank deficient;
    /// the fixed point may then fail to pin down the unobservable subspace.
    pub observable: bool,
}

/// Iterate `P <- A (P - P H^T (H P H^T + R)^{-1} H P) A^T + Q` to
/// convergence. For the scalar unit system `a = h = q = r = 1` the fixed
/// point is the golden ratio `(1 + sqrt(5)) / 2`.
pub fn dare_fixed_point(
    a: &DMatrix<f64>,
    h: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<DareSolution> {
    let d = a.nrows();
    linalg::require_square(a, "dare_fixed_point (A)")?;
    if h.ncols() != d {
        return Err(Error::dims(
            "dare_fixed_point (H)",
            format!("m x {d}"),
            format!("{}x{}", h.nrows(), h.ncols()),
        ));
    }
    linalg::require_psd(q, "dare_fixed_point (Q)")?;
    linalg::require_pd(r, "dare_fixed_point (R)", 0.0)?;

    // Observability matrix [H; HA; ...; HA^{d-1}].
    let m = h.nrows();
    let mut obs = DMatrix::zeros(m * d, d);
    let mut ha = h.clone();
    for i in 0..d {
        obs.view_mut((i * m, 0), (m, d)).copy_from(&ha);
        ha = &ha * a;
    }
    let observable = linalg::rank(&obs, 1e-10) == d;

    let mut p = linalg::symmetrized(q);
    let mut last_residual = f64::INFINITY;
    for it in 0..max_iter {
        let s = linalg::symmetrized(&(h * &p * h.transpose() + r));
        let s_inv = linalg::pd_inverse(&s, "dare_fixed_point (S)", covariance::MAX_S_CONDITION)?;
        let pht = &p * h.transpose();
        let mut next = a * (&p - &pht * &s_inv * pht.transpose()) * a.transpose() + q;
        linalg::symmetrize(&mut next);
        let residual = (&next - &p).norm();
        let scale = p.norm().max(1.0);
        p = next;
        last_residual = residual;
        if residual <= tol * scale {
            let s = linalg::symmetrized(&(h * &p * h.transpose() + r));
            let s_inv =
                linalg::pd_inverse(&s, "dare_fixed_point (S)", covariance::MAX_S_CONDITION)?;
            let gain = &p * h.transpose() * s_inv;
            let p_post = linalg::symmetrized(&((DMatrix::identity(d, d) - &gain * h) * &p));
            return Ok(DareSolution {
                p_pred: p,
                p_post,
                gain,
                iterations: it + 1,
                observable,
            });
        }
    }
    Err(Error::MaxIterations {
        context: "dare_fixed_point",
        max_iter,
        residual: last_residual,
    })
}
