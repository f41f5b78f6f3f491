//! Dictionary lifting, extended dynamic mode decomposition (EDMD), exact
//! linear Kalman filtering in lifted coordinates, and spectral analysis of
//! the estimated operator.
//!
//! The lifted filter path is fully linear: it never calls the
//! finite-difference linearization backend (see
//! [`crate::diff::fd_call_count`] for the structural assertion).

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::filter::{self, Belief, StepRecord};
use crate::linalg;
use crate::model::{make_linear_gaussian, StateSpaceModel};
use crate::rng;

/// A single observable in a dictionary.
#[derive(Clone, Debug, PartialEq)]
pub enum Observable {
    /// `prod_i x_i^{e_i}` for the exponent multi-index `e`.
    Monomial(Vec<u32>),
    /// Gaussian bump `exp(-||x - center||^2 / (2 width^2))`.
    RadialBump { center: DVector<f64>, width: f64 },
}

impl Observable {
    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        match self {
            Observable::Monomial(exps) => exps
                .iter()
                .enumerate()
                .map(|(i, &e)| x[i].powi(e as i32))
                .product(),
            Observable::RadialBump { center, width } => {
                (-(x - center).norm_squared() / (2.0 * width * width)).exp()
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            Observable::Monomial(exps) => {
                let terms: Vec<String> = exps
                    .iter()
                    .enumerate()
                    .filter(|(_, &e)| e > 0)
                    .map(|(i, &e)| {
                        if e == 1 {
                            format!("x{}", i + 1)
                        } else {
                            format!("x{}^{}", i + 1, e)
                        }
                    })
                    .collect();
                if terms.is_empty() {
                    "1".to_string()
                } else {
                    terms.join("*")
                }
            }
            Observable::RadialBump { center, width } => {
                let c: Vec<String> = center.iter().map(|v| format!("{v}")).collect();
                format!("bump([{}], w={width})", c.join(","))
            }
        }
    }
}

/// Ordered list of observables over a `dim`-dimensional state.
#[derive(Clone, Debug)]
pub struct Dictionary {
    pub dim: usize,
    pub observables: Vec<Observable>,
}

impl Dictionary {
    /// Coordinate observables `x_1, ..., x_d`.
    pub fn identity(dim: usize) -> Self {
        let observables = (0..dim)
            .map(|i| {
                let mut e = vec![0u32; dim];
                e[i] = 1;
                Observable::Monomial(e)
            })
            .collect();
        Dictionary { dim, observables }
    }

    /// All monomials of total degree 1..=degree (no constant term), ordered
    /// by total degree, then lexicographically in the exponent vector.
    pub fn monomials(dim: usize, degree: u32) -> Self {
        let mut observables = Vec::new();
        for total in 1..=degree {
            let mut combos = Vec::new();
            enumerate_exponents(dim, total, &mut vec![0; dim], 0, &mut combos);
            // descending lexicographic exponents: x1-leading terms first
            combos.sort_by(|a, b| b.cmp(a));
            observables.extend(combos.into_iter().map(Observable::Monomial));
        }
        Dictionary { dim, observables }
    }

    /// Gaussian bumps centered on a regular grid over `[lo, hi]^dim`.
    pub fn radial_grid(dim: usize, lo: f64, hi: f64, per_axis: usize, width: f64) -> Self {
        let mut centers = vec![DVector::zeros(dim)];
        for axis in 0..dim {
            let mut next = Vec::new();
            for c in &centers {
                for k in 0..per_axis {
                    let frac = if per_axis == 1 {
                        0.5
                    } else {
                        k as f64 / (per_axis - 1) as f64
                    };
                    let mut c2 = c.clone();
                    c2[axis] = lo + frac * (hi - lo);
                    next.push(c2);
                }
            }
            centers = next;
        }
        Dictionary {
            dim,
            observables: centers
                .into_iter()
                .map(|center| Observable::RadialBump { center, width })
                .collect(),
        }
    }

    pub fn custom(dim: usize, observables: Vec<Observable>) -> Self {
        Dictionary { dim, observables }
    }

    pub fn lifted_dim(&self) -> usize {
        self.observables.len()
    }

    pub fn names(&self) -> Vec<String> {
        self.observables.iter().map(Observable::name).collect()
    }

    /// `z = phi(x)`.
    pub fn lift(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.dim {
            return Err(Error::dims(
                "Dictionary::lift",
                format!("{}", self.dim),
                format!("{}", x.len()),
            ));
        }
        Ok(DVector::from_iterator(
            self.lifted_dim(),
            self.observables.iter().map(|o| o.eval(x)),
        ))
    }
}

fn enumerate_exponents(
    dim: usize,
    remaining: u32,
    current: &mut Vec<u32>,
    idx: usize,
    out: &mut Vec<Vec<u32>>,
) {
    if idx == dim {
        if remaining == 0 {
            out.push(current.clone());
        }
        return;
    }
    for e in 0..=remaining {
        current[idx] = e;
        enumerate_exponents(dim, remaining - e, current, idx + 1, out);
    }
    current[idx] = 0;
}

/// Linear Gaussian model in lifted coordinates: `z+ = K z + w`, `y = C z + v`.
#[derive(Clone, Debug)]
pub struct KoopmanModel {
    pub k: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub q_lift: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub dictionary: Dictionary,
    /// Mean squared one-step reconstruction residual from the fit
    /// (`0` for hand-constructed models).
    pub fit_residual: f64,
}

impl KoopmanModel {
    pub fn new(
        k: DMatrix<f64>,
        c: DMatrix<f64>,
        q_lift: DMatrix<f64>,
        r: DMatrix<f64>,
        dictionary: Dictionary,
    ) -> Result<Self> {
        let d = dictionary.lifted_dim();
        if k.nrows() != d || k.ncols() != d || c.ncols() != d {
            return Err(Error::dims(
                "KoopmanModel::new",
                format!("{d}x{d} operator"),
                format!("K {}x{}, C {}x{}", k.nrows(), k.ncols(), c.nrows(), c.ncols()),
            ));
        }
        if !linalg::all_finite_mat(&k) {
            return Err(Error::NonFinite {
                context: "KoopmanModel::new (K)",
                step: 0,
            });
        }
        Ok(KoopmanModel {
            k,
            c,
            q_lift,
            r,
            dictionary,
            fit_residual: 0.0,
        })
    }

    /// The equivalent linear [`StateSpaceModel`] with analytic Jacobians
    /// (no finite differences anywhere in the resulting filter path).
    pub fn as_state_space(&self) -> Result<StateSpaceModel> {
        make_linear_gaussian(
            self.k.clone(),
            self.c.clone(),
            self.q_lift.clone(),
            self.r.clone(),
        )
    }
}

/// EDMD estimate of the lifted operator from snapshot pairs
/// `(x_t, x_{t+1})`: `K = Y Phi^T (Phi Phi^T + lambda I)^{-1}` via the
/// Tikhonov-regularized normal equations.
///
/// `lambda` defaults to `1e-10 * ||G||_F^2 / d` with `G = Phi Phi^T`.
pub fn edmd_fit(
    pairs: &[(DVector<f64>, DVector<f64>)],
    dictionary: &Dictionary,
    lambda: Option<f64>,
) -> Result<(DMatrix<f64>, f64)> {
    let d = dictionary.lifted_dim();
    if pairs.len() < d {
        return Err(Error::RankDeficient {
            context: "edmd_fit",
            rank: pairs.len(),
            required: d,
            directions: format!("{} snapshot pairs for a {d}-dimensional lift", pairs.len()),
        });
    }
    let n = pairs.len();
    let mut phi = DMatrix::zeros(d, n);
    let mut y = DMatrix::zeros(d, n);
    for (t, (x, x_next)) in pairs.iter().enumerate() {
        phi.set_column(t, &dictionary.lift(x)?);
        y.set_column(t, &dictionary.lift(x_next)?);
    }
    let gram = linalg::symmetrized(&(&phi * phi.transpose()));
    let rank = linalg::rank(&phi, 1e-10);
    if rank < d {
        let names = dictionary.names();
        // name observables aligned with near-null eigenvectors of the Gram
        let eig = gram.clone().symmetric_eigen();
        let scale = linalg::max_eigenvalue(&gram).max(1.0);
        let mut deficient = Vec::new();
        for i in 0..d {
            if eig.eigenvalues[i] < 1e-10 * scale {
                let v = eig.eigenvectors.column(i);
                let lead = (0..d).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs())).unwrap();
                deficient.push(names[lead].clone());
            }
        }
        return Err(Error::RankDeficient {
            context: "edmd_fit",
            rank,
            required: d,
            directions: deficient.join(", "),
        });
    }
    // relative to the mean Gram eigenvalue so exact invariant-subspace fits
    // stay exact to well below 1e-10
    let lam = lambda.unwrap_or_else(|| 1e-12 * gram.trace() / d as f64);
    let reg = &gram + DMatrix::from_diagonal_element(d, d, lam);
    let reg_inv = linalg::pd_inverse(&reg, "edmd_fit (Gram)", 1e16)?;
    let k = (&y * phi.transpose()) * reg_inv;
    let residual = (&y - &k * &phi).norm_squared() / n as f64;
    Ok((k, residual))
}

/// One exact linear Kalman step in lifted coordinates. By construction this
/// path performs no linearization (analytic Jacobians throughout).
pub fn lifted_filter_step(
    belief: &Belief,
    model: &KoopmanModel,
    y: &DVector<f64>,
) -> Result<(Belief, StepRecord)> {
    let ss = model.as_state_space()?;
    filter::step(&ss, belief, y, None)
}

/// Spectral summary of a lifted operator.
#[derive(Clone, Debug)]
pub struct SpectrumReport {
    pub eigenvalues: Vec<Complex<f64>>,
    pub spectral_radius: f64,
    /// Condition estimate `||V||_F ||V^{-1}||_F` of the eigenvector matrix.
    pub modal_condition: f64,
    /// Set when `rho(K) >= 1`: the lifted dynamics are not asymptotically
    /// stable.
    pub unstable: bool,
}

/// Eigenvalues, spectral radius, and modal conditioning of `K`.
pub fn spectrum(model: &KoopmanModel) -> Result<SpectrumReport> {
    let (eigenvalues, v) = eigendecompose(&model.k)?;
    let rho = eigenvalues.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let modal_condition = match v.clone().try_inverse() {
        Some(v_inv) => v.norm() * v_inv.norm(),
        None => f64::INFINITY,
    };
    Ok(SpectrumReport {
        spectral_radius: rho,
        unstable: rho >= 1.0,
        eigenvalues,
        modal_condition,
    })
}

/// Modal conditioning above this refuses modal reconstruction.
pub const MODAL_CONDITION_LIMIT: f64 = 1e8;

/// Modal rollout `z_t = V Lambda^t V^{-1} z_0` for `t = 0..=steps`.
/// Refuses (near-)defective operators with a condition diagnostic.
pub fn modal_rollout(
    model: &KoopmanModel,
    z0: &DVector<f64>,
    steps: usize,
) -> Result<Vec<DVector<f64>>> {
    let d = model.k.nrows();
    if z0.len() != d {
        return Err(Error::dims("modal_rollout", format!("{d}"), format!("{}", z0.len())));
    }
    let (eigenvalues, v) = eigendecompose(&model.k)?;
    let v_inv = v.clone().try_inverse().ok_or(Error::DefectiveOperator {
        condition: f64::INFINITY,
        limit: MODAL_CONDITION_LIMIT,
    })?;
    let condition = v.norm() * v_inv.norm();
    if condition > MODAL_CONDITION_LIMIT {
        return Err(Error::DefectiveOperator {
            condition,
            limit: MODAL_CONDITION_LIMIT,
        });
    }
    let z0c = z0.map(|x| Complex::new(x, 0.0));
    let coeffs = &v_inv * z0c;
    let mut out = Vec::with_capacity(steps + 1);
    for t in 0..=steps {
        let mut scaled = coeffs.clone();
        for (i, lam) in eigenvalues.iter().enumerate() {
            scaled[i] *= lam.powu(t as u32);
        }
        let zt = &v * scaled;
        out.push(zt.map(|c| c.re));
    }
    Ok(out)
}

/// Eigenvalues plus eigenvector matrix via shifted inverse iteration on the
/// complexified operator (deterministic seeded starting vectors).
fn eigendecompose(k: &DMatrix<f64>) -> Result<(Vec<Complex<f64>>, DMatrix<Complex<f64>>)> {
    let d = k.nrows();
    linalg::require_square(k, "eigendecompose")?;
    let eigenvalues: Vec<Complex<f64>> = k.complex_eigenvalues().iter().copied().collect();
    let kc = k.map(|x| Complex::new(x, 0.0));
    let scale = k.norm().max(1.0);
    let mut v = DMatrix::<Complex<f64>>::zeros(d, d);
    for (i, &lam) in eigenvalues.iter().enumerate() {
        // small deterministic shift keeps the shifted matrix invertible
        let shift = lam + Complex::new(1e-8 * scale, 1e-8 * scale);
        let shifted = &kc - DMatrix::from_diagonal_element(d, d, shift);
        let lu = shifted.lu();
        let mut rng_i = rng::stream(0x6b6f6f70, i as u64, 0);
        let mut b: DVector<Complex<f64>> = DVector::from_iterator(
            d,
            rng::standard_normal_vector(&mut rng_i, 2 * d)
                .as_slice()
                .chunks(2)
                .map(|c| Complex::new(c[0], c[1])),
        );
        b /= Complex::new(b.norm(), 0.0);
        for _ in 0..4 {
            match lu.solve(&b) {
                Some(next) => {
                    let n = next.norm();
                    if !n.is_finite() || n == 0.0 {
                        break;
                    }
                    b = next / Complex::new(n, 0.0);
                }
                None => break,
            }
        }
        v.set_column(i, &b);
    }
    Ok((eigenvalues, v))
}

/// Quadratic benchmark system: `x1+ = lambda x1`, `x2+ = mu x2 + c x1^2`.
/// The dictionary `{x1, x2, x1^2}` spans an invariant subspace, so the lift
/// is exactly linear.
pub fn quadratic_benchmark_map(lambda: f64, mu: f64, c: f64) -> impl Fn(&DVector<f64>) -> DVector<f64> {
    move |x: &DVector<f64>| DVector::from_vec(vec![lambda * x[0], mu * x[1] + c * x[0] * x[0]])
}

/// The dictionary `{x1, x2, x1^2}` for the quadratic benchmark.
pub fn quadratic_benchmark_dictionary() -> Dictionary {
    Dictionary::custom(
        2,
        vec![
            Observable::Monomial(vec![1, 0]),
            Observable::Monomial(vec![0, 1]),
            Observable::Monomial(vec![2, 0]),
        ],
    )
}

/// Analytic lifted operator of the quadratic benchmark.
pub fn quadratic_benchmark_operator(lambda: f64, mu: f64, c: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(
        3,
        3,
        &[lambda, 0.0, 0.0, 0.0, mu, c, 0.0, 0.0, lambda * lambda],
    )
}
