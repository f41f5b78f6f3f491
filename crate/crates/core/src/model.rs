//! State-space systems, augmented parameter-states, observation likelihoods,
//! and seeded synthetic data generation.
//!
//! The system under study is
//!
//! ```text
//! x_{t+1} = f(x_t, u_t) + w_t,    w_t ~ N(0, Q)
//! y_t     = h(x_t)      + v_t,    v_t ~ N(0, R)
//! ```
//!
//! with optional analytic Jacobians for both maps. Parameters are folded in
//! by state augmentation: `z = [x; theta]` propagates as `[f(z, u); theta]`
//! plus diffusion, so a filter over `z` estimates states and parameters
//! jointly.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::diff::jacobian_fd;
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng;

pub type StateFn = Arc<dyn Fn(&DVector<f64>, Option<&DVector<f64>>) -> DVector<f64> + Send + Sync>;
pub type JacobianFn =
    Arc<dyn Fn(&DVector<f64>, Option<&DVector<f64>>) -> DMatrix<f64> + Send + Sync>;

/// Nonlinear (or linear) Gaussian state-space model.
///
/// For models intended for parameter augmentation, the transition and
/// observation closures are evaluated on the full augmented vector
/// `[x; theta]`; the transition returns only the `state_dim` next-state
/// entries. Linear models built by [`make_linear_gaussian`] read only the
/// leading `state_dim` entries, so they remain valid either way.
#[derive(Clone)]
pub struct StateSpaceModel {
    pub state_dim: usize,
    pub obs_dim: usize,
    transition: StateFn,
    transition_jacobian: Option<JacobianFn>,
    observation: StateFn,
    observation_jacobian: Option<JacobianFn>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl std::fmt::Debug for StateSpaceModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StateSpaceModel")
            .field("state_dim", &self.state_dim)
            .field("obs_dim", &self.obs_dim)
            .field("analytic_transition_jacobian", &self.transition_jacobian.is_some())
            .field("analytic_observation_jacobian", &self.observation_jacobian.is_some())
            .field("q", &self.q)
            .field("r", &self.r)
            .finish_non_exhaustive()
    }
}

/// Strictly positive-definite floor demanded of `R` at construction.
pub const R_MIN_EIGENVALUE: f64 = 1e-12;

impl StateSpaceModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        state_dim: usize,
        obs_dim: usize,
        transition: StateFn,
        transition_jacobian: Option<JacobianFn>,
        observation: StateFn,
        observation_jacobian: Option<JacobianFn>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
    ) -> Result<Self> {
        if q.nrows() != state_dim || q.ncols() != state_dim {
            return Err(Error::dims(
                "StateSpaceModel::new (Q)",
                format!("{state_dim}x{state_dim}"),
                format!("{}x{}", q.nrows(), q.ncols()),
            ));
        }
        if r.nrows() != obs_dim || r.ncols() != obs_dim {
            return Err(Error::dims(
                "StateSpaceModel::new (R)",
                format!("{obs_dim}x{obs_dim}"),
                format!("{}x{}", r.nrows(), r.ncols()),
            ));
        }
        linalg::require_psd(&q, "StateSpaceModel::new (Q)")?;
        linalg::require_pd(&r, "StateSpaceModel::new (R)", R_MIN_EIGENVALUE)?;
        Ok(Self {
            state_dim,
            obs_dim,
            transition,
            transition_jacobian,
            observation,
            observation_jacobian,
            q: linalg::symmetrized(&q),
            r: linalg::symmetrized(&r),
        })
    }

    pub fn transition(&self, x: &DVector<f64>, u: Option<&DVector<f64>>) -> DVector<f64> {
        (self.transition)(x, u)
    }

    pub fn observation(&self, x: &DVector<f64>, u: Option<&DVector<f64>>) -> DVector<f64> {
        (self.observation)(x, u)
    }

    pub fn has_analytic_transition_jacobian(&self) -> bool {
        self.transition_jacobian.is_some()
    }

    pub fn has_analytic_observation_jacobian(&self) -> bool {
        self.observation_jacobian.is_some()
    }

    /// Transition Jacobian at `x`: analytic when supplied, otherwise central
    /// finite differences.
    pub fn transition_jacobian(&self, x: &DVector<f64>, u: Option<&DVector<f64>>) -> DMatrix<f64> {
        match &self.transition_jacobian {
            Some(j) => j(x, u),
            None => {
                let f = self.transition.clone();
                jacobian_fd(move |z| f(z, u), x)
            }
        }
    }

    pub fn observation_jacobian(&self, x: &DVector<f64>, u: Option<&DVector<f64>>) -> DMatrix<f64> {
        match &self.observation_jacobian {
            Some(j) => j(x, u),
            None => {
                let h = self.observation.clone();
                jacobian_fd(move |z| h(z, u), x)
            }
        }
    }

    /// Max relative error between analytic and finite-difference Jacobians at
    /// `n_probes` random points. Used by the construction-time invariant.
    pub fn jacobian_consistency(&self, dim: usize, n_probes: usize, seed: u64) -> f64 {
        let mut worst = 0.0_f64;
        for p in 0..n_probes {
            let mut r = rng::stream(seed, p as u64, 90);
            let x = rng::standard_normal_vector(&mut r, dim);
            if let Some(j) = &self.transition_jacobian {
                let analytic = j(&x, None);
                let f = self.transition.clone();
                let fd = jacobian_fd(move |z| f(z, None), &x);
                let denom = analytic.norm().max(1.0);
                worst = worst.max((analytic - fd).norm() / denom);
            }
            if let Some(j) = &self.observation_jacobian {
                let analytic = j(&x, None);
                let h = self.observation.clone();
                let fd = jacobian_fd(move |z| h(z, None), &x);
                let denom = analytic.norm().max(1.0);
                worst = worst.max((analytic - fd).norm() / denom);
            }
        }
        worst
    }
}

/// Linear Gaussian system `x' = A x + w`, `y = C x + v` with analytic
/// Jacobians attached. R must be strictly PD; a failing eigenvalue is named
/// in the error.
pub fn make_linear_gaussian(
    a: DMatrix<f64>,
    c: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
) -> Result<StateSpaceModel> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::dims(
            "make_linear_gaussian (A)",
            "square matrix",
            format!("{}x{}", a.nrows(), a.ncols()),
        ));
    }
    if c.ncols() != n {
        return Err(Error::dims(
            "make_linear_gaussian (C)",
            format!("m x {n}"),
            format!("{}x{}", c.nrows(), c.ncols()),
        ));
    }
    let m = c.nrows();
    let (ta, tc) = (a.clone(), c.clone());
    let (ja, jc) = (a.clone(), c.clone());
    let transition: StateFn = Arc::new(move |x, _| &ta * x.rows(0, ta.ncols()));
    let observation: StateFn = Arc::new(move |x, _| &tc * x.rows(0, tc.ncols()));
    // Jacobians are padded with zero columns when evaluated on an augmented
    // state, matching the "parameters do not enter linear dynamics" shape.
    let transition_jacobian: JacobianFn = Arc::new(move |x, _| {
        let mut out = DMatrix::zeros(ja.nrows(), x.len());
        out.view_mut((0, 0), ja.shape()).copy_from(&ja);
        out
    });
    let observation_jacobian: JacobianFn = Arc::new(move |x, _| {
        let mut out = DMatrix::zeros(jc.nrows(), x.len());
        out.view_mut((0, 0), jc.shape()).copy_from(&jc);
        out
    });
    let _ = m;
    StateSpaceModel::new(
        n,
        c.nrows(),
        transition,
        Some(transition_jacobian),
        observation,
        Some(observation_jacobian),
        q,
        r,
    )
}

/// State augmented with a parameter block that propagates as identity plus
/// diffusion `Q_theta`.
#[derive(Clone)]
pub struct AugmentedModel {
    /// The full augmented system over `z = [x; theta]`.
    pub model: StateSpaceModel,
    pub base_state_dim: usize,
    pub param_dim: usize,
    pub theta0: DVector<f64>,
    pub param_diffusion: DMatrix<f64>,
}

impl AugmentedModel {
    pub fn augmented_dim(&self) -> usize {
        self.base_state_dim + self.param_dim
    }

    /// Initial augmented mean `[x0; theta0]`.
    pub fn initial_mean(&self, x0: &DVector<f64>) -> DVector<f64> {
        let mut z = DVector::zeros(self.augmented_dim());
        z.rows_mut(0, self.base_state_dim).copy_from(x0);
        z.rows_mut(self.base_state_dim, self.param_dim)
            .copy_from(&self.theta0);
        z
    }
}

/// Augment `model` with a parameter random walk.
///
/// The base model's maps are evaluated on the full augmented vector; the
/// augmented transition is `[f(z, u); theta]` and the augmented process
/// noise is `blockdiag(Q, Q_theta)`.
pub fn augment_parameters(
    model: &StateSpaceModel,
    theta0: DVector<f64>,
    q_theta: DMatrix<f64>,
) -> Result<AugmentedModel> {
    let p = theta0.len();
    if q_theta.nrows() != p || q_theta.ncols() != p {
        return Err(Error::dims(
            "augment_parameters (Q_theta)",
            format!("{p}x{p}"),
            format!("{}x{}", q_theta.nrows(), q_theta.ncols()),
        ));
    }
    linalg::require_psd(&q_theta, "augment_parameters (Q_theta)")?;
    let n = model.state_dim;
    let d = n + p;

    let mut q_aug = DMatrix::zeros(d, d);
    q_aug.view_mut((0, 0), (n, n)).copy_from(&model.q);
    q_aug.view_mut((n, n), (p, p)).copy_from(&q_theta);

    let base = model.clone();
    let transition: StateFn = Arc::new(move |z, u| {
        let mut out = DVector::zeros(d);
        if n > 0 {
            out.rows_mut(0, n).copy_from(&base.transition(z, u));
        }
        out.rows_mut(n, p).copy_from(&z.rows(n, p));
        out
    });

    let base_j = model.clone();
    let transition_jacobian: JacobianFn = Arc::new(move |z, u| {
        let mut jac = DMatrix::zeros(d, d);
        if n > 0 {
            let jf = base_j.transition_jacobian(z, u);
            jac.view_mut((0, 0), (n, d)).copy_from(&jf.columns(0, d));
        }
        for i in 0..p {
            jac[(n + i, n + i)] = 1.0;
        }
        jac
    });

    let base_h = model.clone();
    let observation: StateFn = Arc::new(move |z, u| base_h.observation(z, u));
    let base_hj = model.clone();
    let observation_jacobian: JacobianFn = Arc::new(move |z, u| base_hj.observation_jacobian(z, u));

    let augmented = StateSpaceModel::new(
        d,
        model.obs_dim,
        transition,
        Some(transition_jacobian),
        observation,
        Some(observation_jacobian),
        q_aug,
        model.r.clone(),
    )?;

    Ok(AugmentedModel {
        model: augmented,
        base_state_dim: n,
        param_dim: p,
        theta0,
        param_diffusion: q_theta,
    })
}

/// Pure parameter estimation: a zero-dimensional base state so the augmented
/// state is `theta` itself and the transition is the identity.
pub fn pure_parameter_model(
    theta0: DVector<f64>,
    q_theta: DMatrix<f64>,
    observation: StateFn,
    observation_jacobian: Option<JacobianFn>,
    r: DMatrix<f64>,
) -> Result<AugmentedModel> {
    let obs_dim = r.nrows();
    let base = StateSpaceModel::new(
        0,
        obs_dim,
        Arc::new(|_, _| DVector::zeros(0)),
        Some(Arc::new(|z: &DVector<f64>, _: Option<&DVector<f64>>| {
            DMatrix::zeros(0, z.len())
        })),
        observation,
        observation_jacobian,
        DMatrix::zeros(0, 0),
        r,
    )?;
    augment_parameters(&base, theta0, q_theta)
}

/// Numerically stable softmax.
pub fn softmax(logits: &DVector<f64>) -> DVector<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.map(|z| (z - max).exp());
    let sum = out.sum();
    out /= sum;
    out
}

/// Jacobian of softmax at probabilities `s`: `diag(s) - s s^T`.
pub fn softmax_jacobian(s: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_diagonal(s) - s * s.transpose()
}

/// Observation likelihood families.
#[derive(Clone)]
pub enum ObservationLikelihood {
    GaussianObs { r: DMatrix<f64> },
    /// Categorical over a vocabulary of size `V` with logits `W x`.
    CategoricalSoftmaxObs { w: DMatrix<f64> },
}

impl ObservationLikelihood {
    /// Predicted observation mean: `C`-free Gaussian models pass through;
    /// categorical emits softmax probabilities.
    pub fn probabilities(&self, state: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            ObservationLikelihood::GaussianObs { .. } => Ok(state.clone()),
            ObservationLikelihood::CategoricalSoftmaxObs { w } => {
                if w.ncols() != state.len() {
                    return Err(Error::dims(
                        "ObservationLikelihood::probabilities",
                        format!("state of length {}", w.ncols()),
                        format!("{}", state.len()),
                    ));
                }
                Ok(softmax(&(w * state)))
            }
        }
    }
}

/// Seed-reproducible simulated rollout. `states[0] = x0` and
/// `observations[k] = h(states[k]) + v_k`.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<Option<DVector<f64>>>,
    pub observations: Vec<DVector<f64>>,
    pub seed: u64,
}

/// Simulate `steps >= 1` states from `x0` under seeded process/observation
/// noise. Noise draws are keyed by `(seed, step, channel)`, so the result is
/// a pure function of its arguments.
pub fn simulate(
    model: &StateSpaceModel,
    steps: usize,
    x0: &DVector<f64>,
    seed: u64,
) -> Result<Trajectory> {
    simulate_with_inputs(model, steps, x0, seed, &[])
}

pub fn simulate_with_inputs(
    model: &StateSpaceModel,
    steps: usize,
    x0: &DVector<f64>,
    seed: u64,
    inputs: &[DVector<f64>],
) -> Result<Trajectory> {
    if steps == 0 {
        return Err(Error::invalid("simulate", "steps must be >= 1"));
    }
    if x0.len() != model.state_dim {
        return Err(Error::dims(
            "simulate (x0)",
            format!("{}", model.state_dim),
            format!("{}", x0.len()),
        ));
    }
    let q_sqrt = linalg::psd_sqrt(&model.q);
    let r_sqrt = linalg::psd_sqrt(&model.r);
    let mut states = Vec::with_capacity(steps);
    let mut used_inputs = Vec::with_capacity(steps);
    let mut observations = Vec::with_capacity(steps);
    let mut x = x0.clone();
    for k in 0..steps {
        let u = inputs.get(k);
        if k > 0 {
            let mut wr = rng::stream(seed, k as u64, 0);
            let w = rng::gaussian_with_sqrt(&mut wr, &q_sqrt);
            x = model.transition(&x, u) + w;
        }
        if !linalg::all_finite_vec(&x) {
            return Err(Error::NonFinite {
                context: "simulate (transition)",
                step: k as u64,
            });
        }
        let mut vr = rng::stream(seed, k as u64, 1);
        let v = rng::gaussian_with_sqrt(&mut vr, &r_sqrt);
        let y = model.observation(&x, u) + v;
        states.push(x.clone());
        used_inputs.push(u.cloned());
        observations.push(y);
    }
    Ok(Trajectory {
        states,
        inputs: used_inputs,
        observations,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn identity_model_construction() {
        let m = make_linear_gaussian(
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let x = DVector::from_vec(vec![1.0, -2.0]);
        assert_eq!(m.transition(&x, None), x);
    }

    #[test]
    fn non_pd_r_rejected_with_eigenvalue() {
        let err = make_linear_gaussian(
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::zeros(1, 1),
            dmatrix![-0.5],
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("positive definite"), "{msg}");
        assert!(msg.contains("-5.000e-1") || msg.contains("-5.000e1") || msg.contains("-5"), "{msg}");
    }

    #[test]
    fn oscillator_observability_rank_two() {
        // Gaussian-elimination rank oracle, independent of nalgebra's SVD.
        fn ge_rank(mut m: DMatrix<f64>) -> usize {
            let (rows, cols) = m.shape();
            let mut rank = 0;
            for col in 0..cols {
                let pivot = (rank..rows).max_by(|&a, &b| m[(a, col)].abs().total_cmp(&m[(b, col)].abs()));
                let Some(p) = pivot else { break };
                if m[(p, col)].abs() < 1e-12 {
                    continue;
                }
                m.swap_rows(rank, p);
                for r in (rank + 1)..rows {
                    let f = m[(r, col)] / m[(rank, col)];
                    for c in col..cols {
                        m[(r, c)] -= f * m[(rank, c)];
                    }
                }
                rank += 1;
            }
            rank
        }
        let a = dmatrix![0.0, 1.0; -0.1, 0.8];
        let c = dmatrix![1.0, 0.0];
        let ca = &c * &a;
        let mut obs = DMatrix::zeros(2, 2);
        obs.row_mut(0).copy_from(&c.row(0));
        obs.row_mut(1).copy_from(&ca.row(0));
        assert_eq!(ge_rank(obs), 2);
        let model = make_linear_gaussian(a, c, DMatrix::zeros(2, 2), DMatrix::identity(1, 1));
        assert!(model.is_ok());
    }

    #[test]
    fn augment_static_parameters_identity_transition() {
        let base = StateSpaceModel::new(
            0,
            1,
            Arc::new(|_, _| DVector::zeros(0)),
            None,
            Arc::new(|z: &DVector<f64>, _| DVector::from_vec(vec![z[0] + z[1]])),
            None,
            DMatrix::zeros(0, 0),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let aug = augment_parameters(&base, DVector::zeros(2), DMatrix::zeros(2, 2)).unwrap();
        let theta = DVector::from_vec(vec![0.7, -0.3]);
        assert_eq!(aug.model.transition(&theta, None), theta);
        assert_eq!(aug.augmented_dim(), 2);
    }

    #[test]
    fn augment_diffusion_grows_process_noise() {
        let base = make_linear_gaussian(
            dmatrix![0.5],
            dmatrix![1.0],
            DMatrix::zeros(1, 1),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let aug = augment_parameters(
            &base,
            DVector::from_vec(vec![0.0]),
            DMatrix::from_diagonal_element(1, 1, 1e-4),
        )
        .unwrap();
        assert_eq!(aug.model.q[(1, 1)], 1e-4);
        assert_eq!(aug.model.q[(0, 1)], 0.0);
    }

    #[test]
    fn augmented_fd_jacobian_has_identity_parameter_block() {
        // 1-D state + 1-D parameter: f(z) = theta * x.
        let base = StateSpaceModel::new(
            1,
            1,
            Arc::new(|z: &DVector<f64>, _| DVector::from_vec(vec![z[1] * z[0]])),
            None,
            Arc::new(|z: &DVector<f64>, _| DVector::from_vec(vec![z[0]])),
            None,
            DMatrix::zeros(1, 1),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let aug = augment_parameters(
            &base,
            DVector::from_vec(vec![0.9]),
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        let z = DVector::from_vec(vec![2.0, 0.9]);
        let f = aug.model.clone();
        let jac = jacobian_fd(move |zz| f.transition(zz, None), &z);
        assert_eq!(jac.nrows(), 2);
        assert!((jac[(1, 0)]).abs() < 1e-8);
        assert!((jac[(1, 1)] - 1.0).abs() < 1e-8);
        // analytic augmented Jacobian agrees
        let analytic = aug.model.transition_jacobian(&z, None);
        assert!((analytic - jac).norm() < 1e-6);
    }

    #[test]
    fn simulate_constant_when_noiseless_identity() {
        let m = make_linear_gaussian(
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
            DMatrix::from_diagonal_element(2, 2, 1e-12),
        )
        .unwrap();
        let x0 = DVector::from_vec(vec![1.0, 2.0]);
        let traj = simulate(&m, 5, &x0, 3).unwrap();
        for s in &traj.states {
            assert_eq!(s, &x0);
        }
    }

    #[test]
    fn simulate_same_seed_bit_identical() {
        let m = make_linear_gaussian(
            dmatrix![0.9],
            dmatrix![1.0],
            dmatrix![0.3],
            dmatrix![0.5],
        )
        .unwrap();
        let x0 = DVector::from_vec(vec![1.0]);
        let a = simulate(&m, 20, &x0, 42).unwrap();
        let b = simulate(&m, 20, &x0, 42).unwrap();
        for (s, t) in a.states.iter().zip(&b.states) {
            assert_eq!(s, t);
        }
        for (s, t) in a.observations.iter().zip(&b.observations) {
            assert_eq!(s, t);
        }
    }

    #[test]
    fn simulate_halving_decay() {
        let m = make_linear_gaussian(
            dmatrix![0.5],
            dmatrix![1.0],
            DMatrix::zeros(1, 1),
            dmatrix![1e-12],
        )
        .unwrap();
        let traj = simulate(&m, 4, &DVector::from_vec(vec![1.0]), 0).unwrap();
        let want = [1.0, 0.5, 0.25, 0.125];
        for (s, w) in traj.states.iter().zip(want) {
            assert!((s[0] - w).abs() < 1e-12);
        }
    }

    #[test]
    fn categorical_probabilities_sum_to_one() {
        let w = DMatrix::from_row_slice(3, 2, &[1.0, -2.0, 0.5, 0.25, -1.0, 3.0]);
        let lik = ObservationLikelihood::CategoricalSoftmaxObs { w };
        let s = lik
            .probabilities(&DVector::from_vec(vec![0.3, -0.7]))
            .unwrap();
        assert!((s.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_jacobian_matches_finite_differences() {
        let w = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, -0.5, 0.0, 1.5, 0.3, -0.2, 0.1, 0.9]);
        let x = DVector::from_vec(vec![0.4, -0.2, 0.8]);
        let wc = w.clone();
        let fd = jacobian_fd(move |z| softmax(&(&wc * z)), &x);
        let s = softmax(&(&w * &x));
        let analytic = softmax_jacobian(&s) * &w;
        assert!((analytic - fd).norm() < 1e-6);
    }
}
