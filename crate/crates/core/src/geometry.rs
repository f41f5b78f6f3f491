//! Fisher information metrics and the executable correspondence between the
//! Kalman gain and natural-gradient preconditioning.
//!
//! Two regimes are measured rather than asserted as a single theorem:
//!
//! - `gap_ng`: distance between the Kalman gain and the undamped natural
//!   gradient map `F^{-1} H^T R^{-1}`, which vanishes as the observation
//!   noise goes to zero with `P` held fixed;
//! - `gap_damped`: distance to the half-step `1/2 F^{-1} H^T R^{-1}`, which
//!   is exactly zero when `P = F^{-1}` and `H` is square invertible.

use nalgebra::{DMatrix, DVector};

use crate::covariance::{self, CovarianceRepr};
use crate::error::{Error, Result};
use crate::linalg;

/// Origin of a Fisher metric.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FisherSource {
    Gaussian,
    Categorical,
}

/// Symmetric PSD information metric with an explicit diagonal regularizer.
#[derive(Clone, Debug)]
pub struct FisherMetric {
    pub f: DMatrix<f64>,
    pub source: FisherSource,
    /// Diagonal ridge added when inverting; defaults to
    /// `1e-8 * trace(F) / d` for singular metrics.
    pub regularization: f64,
}

impl FisherMetric {
    fn new(f: DMatrix<f64>, source: FisherSource) -> Self {
        let d = f.nrows().max(1) as f64;
        let regularization = 1e-8 * f.trace().abs() / d;
        FisherMetric {
            f: linalg::symmetrized(&f),
            source,
            regularization,
        }
    }

    pub fn with_regularization(mut self, eps: f64) -> Self {
        self.regularization = eps;
        self
    }

    pub fn dim(&self) -> usize {
        self.f.nrows()
    }

    /// `(F + eps I)^{-1}`.
    pub fn regularized_inverse(&self) -> Result<DMatrix<f64>> {
        let d = self.dim();
        let reg = &self.f + DMatrix::from_diagonal_element(d, d, self.regularization);
        linalg::pd_inverse(&reg, "FisherMetric::regularized_inverse", 1e14)
    }
}

/// Gauss-Newton information of a linear-Gaussian observation:
/// `F = H^T R^{-1} H`.
pub fn fisher_gaussian(h: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<FisherMetric> {
    if r.nrows() != h.nrows() || r.ncols() != h.nrows() {
        return Err(Error::dims(
            "fisher_gaussian",
            format!("{0}x{0}", h.nrows()),
            format!("{}x{}", r.nrows(), r.ncols()),
        ));
    }
    let r_inv = linalg::pd_inverse(r, "fisher_gaussian (R)", 1e14)?;
    Ok(FisherMetric::new(
        h.transpose() * r_inv * h,
        FisherSource::Gaussian,
    ))
}

/// Fisher information of a categorical-softmax emission in activation
/// space: `F_h = W^T (diag(s) - s s^T) W`.
pub fn fisher_categorical(w: &DMatrix<f64>, s: &DVector<f64>) -> Result<FisherMetric> {
    if s.len() != w.nrows() {
        return Err(Error::dims(
            "fisher_categorical",
            format!("{}", w.nrows()),
            format!("{}", s.len()),
        ));
    }
    let sum: f64 = s.iter().sum();
    if (sum - 1.0).abs() > 1e-10 || s.iter().any(|&p| p < -1e-12) {
        return Err(Error::invalid(
            "fisher_categorical",
            format!("probability vector off the simplex (sum = {sum})"),
        ));
    }
    let cov = DMatrix::from_diagonal(s) - s * s.transpose();
    Ok(FisherMetric::new(
        w.transpose() * cov * w,
        FisherSource::Categorical,
    ))
}

/// `theta' = theta + eta (F + eps I)^{-1} grad`.
pub fn natural_gradient_step(
    theta: &DVector<f64>,
    fisher: &FisherMetric,
    grad: &DVector<f64>,
    eta: f64,
) -> Result<DVector<f64>> {
    if theta.len() != fisher.dim() || grad.len() != fisher.dim() {
        return Err(Error::dims(
            "natural_gradient_step",
            format!("{}", fisher.dim()),
            format!("theta {}, grad {}", theta.len(), grad.len()),
        ));
    }
    Ok(theta + fisher.regularized_inverse()? * grad * eta)
}

/// Measured distances between the Kalman gain and natural-gradient maps.
#[derive(Clone, Debug)]
pub struct EquivalenceGap {
    /// `||K - F^{-1} H^T R^{-1}||_F / ||K||_F`; `None` when `H` is column
    /// rank deficient (the undamped map is then undefined).
    pub gap_ng: Option<f64>,
    /// `||K - 1/2 F^{-1} H^T R^{-1}||_F / ||K||_F`.
    pub gap_damped: f64,
}

/// Compare the Kalman gain for covariance `P` against the natural-gradient
/// preconditioner built from `F = H^T R^{-1} H`.
pub fn equivalence_gap(
    p: &CovarianceRepr,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<EquivalenceGap> {
    let g = covariance::gain(p, h, r)?;
    let k_norm = g.k.norm();
    if k_norm == 0.0 {
        return Err(Error::invalid("equivalence_gap", "zero Kalman gain"));
    }
    let full_rank = linalg::rank(h, 1e-10) == h.ncols();
    let fisher = fisher_gaussian(h, r)?;
    let r_inv = linalg::pd_inverse(r, "equivalence_gap (R)", 1e14)?;
    let ng_map = if full_rank {
        // exact F^{-1}, no ridge: full column rank makes F PD
        let f_inv = linalg::pd_inverse(&fisher.f, "equivalence_gap (F)", 1e14)?;
        Some(f_inv * h.transpose() * &r_inv)
    } else {
        None
    };
    let gap_ng = ng_map.as_ref().map(|m| (&g.k - m).norm() / k_norm);
    let gap_damped = match &ng_map {
        Some(m) => (&g.k - m * 0.5).norm() / k_norm,
        None => {
            let reg_inv = fisher.regularized_inverse()?;
            (&g.k - reg_inv * h.transpose() * &r_inv * 0.5).norm() / k_norm
        }
    };
    Ok(EquivalenceGap { gap_ng, gap_damped })
}

/// Gradient of the Gaussian negative log-likelihood at the prediction:
/// `H^T R^{-1} (y - y_hat)`.
pub fn gaussian_score(
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
    residual: &DVector<f64>,
) -> Result<DVector<f64>> {
    let r_inv = linalg::pd_inverse(r, "gaussian_score (R)", 1e14)?;
    Ok(h.transpose() * r_inv * residual)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn fisher_gaussian_hand_values() {
        let f = fisher_gaussian(&DMatrix::identity(2, 2), &DMatrix::identity(2, 2)).unwrap();
        assert!((f.f.clone() - DMatrix::identity(2, 2)).norm() < 1e-14);
        let f = fisher_gaussian(&dmatrix![2.0], &dmatrix![4.0]).unwrap();
        assert!((f.f[(0, 0)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn fisher_gaussian_rank_deficient_is_singular() {
        // one observation row of three parameters: rank 1, min eigenvalue 0
        let h = dmatrix![1.0, 2.0, 0.5];
        let f = fisher_gaussian(&h, &dmatrix![1.0]).unwrap();
        let min = linalg::min_eigenvalue(&f.f);
        assert!(min.abs() < 1e-12);
    }

    #[test]
    fn fisher_categorical_two_class() {
        let f = fisher_categorical(&DMatrix::identity(2, 2), &dvector![0.5, 0.5]).unwrap();
        let want = dmatrix![0.25, -0.25; -0.25, 0.25];
        assert!((f.f - want).norm() < 1e-14);
    }

    #[test]
    fn fisher_categorical_one_hot_is_zero() {
        let f = fisher_categorical(&DMatrix::identity(3, 3), &dvector![1.0, 0.0, 0.0]).unwrap();
        assert!(f.f.norm() < 1e-14);
    }

    #[test]
    fn fisher_categorical_rejects_off_simplex() {
        let err = fisher_categorical(&DMatrix::identity(2, 2), &dvector![0.7, 0.7]).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument { .. }));
    }

    #[test]
    fn natural_gradient_identity_metric_is_plain_gradient() {
        let fisher =
            FisherMetric::new(DMatrix::identity(2, 2), FisherSource::Gaussian).with_regularization(0.0);
        let next =
            natural_gradient_step(&dvector![1.0, 2.0], &fisher, &dvector![0.5, -0.5], 1.0).unwrap();
        assert!((next - dvector![1.5, 1.5]).norm() < 1e-12);
    }

    #[test]
    fn natural_gradient_scalar_hand_value() {
        let fisher = FisherMetric::new(dmatrix![4.0], FisherSource::Gaussian).with_regularization(0.0);
        let next = natural_gradient_step(&dvector![0.0], &fisher, &dvector![8.0], 1.0).unwrap();
        assert!((next[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn gap_ng_vanishes_in_small_noise_limit() {
        // H = 2, P = 1, R = 1e-8: K approaches H^{-1} = 0.5
        let gap = equivalence_gap(
            &CovarianceRepr::dense(dmatrix![1.0]),
            &dmatrix![2.0],
            &dmatrix![1e-8],
        )
        .unwrap();
        assert!(gap.gap_ng.unwrap() <= 1e-7);
    }

    #[test]
    fn damped_identity_exact_for_p_equals_f_inverse() {
        // scalar H=1, R=1: F=1, P=F^{-1}=1 -> K = 0.5 = 1/2 F^{-1} H^T R^{-1}
        let gap = equivalence_gap(
            &CovarianceRepr::dense(dmatrix![1.0]),
            &dmatrix![1.0],
            &dmatrix![1.0],
        )
        .unwrap();
        assert!(gap.gap_damped <= 1e-12);
        assert!((gap.gap_ng.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gap_ng_monotone_in_r_scale() {
        let mut prev = f64::INFINITY;
        for k in 1..=8 {
            let r_scale = 10f64.powi(-k);
            let d = 3;
            let gap = equivalence_gap(
                &CovarianceRepr::dense(DMatrix::identity(d, d)),
                &DMatrix::identity(d, d),
                &DMatrix::from_diagonal_element(d, d, r_scale),
            )
            .unwrap();
            let g = gap.gap_ng.unwrap();
            assert!(g < prev, "gap must decay as R -> 0");
            prev = g;
        }
    }

    #[test]
    fn reparameterization_invariance() {
        // theta = T phi: natural gradient step in phi maps back through T to
        // the step in theta.
        let t = dmatrix![2.0, 0.5; -0.3, 1.5];
        let h = dmatrix![1.0, 0.4; 0.2, 0.9];
        let r = DMatrix::identity(2, 2);
        let y_res = dvector![0.7, -0.2];
        let theta = dvector![0.3, -0.1];

        let f_theta = fisher_gaussian(&h, &r).unwrap().with_regularization(0.0);
        let g_theta = gaussian_score(&h, &r, &y_res).unwrap();
        let step_theta =
            natural_gradient_step(&theta, &f_theta, &g_theta, 0.1).unwrap() - &theta;

        // in phi coordinates the observation map is H T
        let ht = &h * &t;
        let f_phi = fisher_gaussian(&ht, &r).unwrap().with_regularization(0.0);
        let g_phi = gaussian_score(&ht, &r, &y_res).unwrap();
        let phi = t.clone().try_inverse().unwrap() * &theta;
        let step_phi = natural_gradient_step(&phi, &f_phi, &g_phi, 0.1).unwrap() - &phi;

        assert!((&t * step_phi - step_theta).norm() < 1e-8);
    }

    #[test]
    fn gaussian_score_matches_finite_differences() {
        // log-likelihood -1/2 (y - H theta)^T R^{-1} (y - H theta);
        // its gradient in theta is H^T R^{-1} (y - H theta).
        let h = dmatrix![1.0, 0.5; -0.2, 0.8];
        let r = dmatrix![0.5, 0.1; 0.1, 0.7];
        let y = dvector![1.0, -0.3];
        let theta = dvector![0.2, 0.4];
        let r_inv = r.clone().try_inverse().unwrap();
        let loglik = {
            let h = h.clone();
            let y = y.clone();
            move |th: &DVector<f64>| {
                let e = &y - &h * th;
                -0.5 * e.dot(&(&r_inv * &e))
            }
        };
        let fd = crate::diff::gradient_fd(&loglik, &theta);
        let analytic = gaussian_score(&h, &r, &(y - &h * &theta)).unwrap();
        assert!((fd - analytic).norm() < 1e-6);
    }
}
