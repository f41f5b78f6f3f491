//! Benchmark harness: seeded synthetic tasks, a filtering learner, first-order
//! baselines, a continual-learning protocol with a forgetting metric, and
//! metric export.
//!
//! Every run is a pure function of `(config, seed)`: all data generation and
//! learner randomness flows through counter-based streams derived from the
//! run seed. Per-step diagnostics accumulate in an append-only [`RunRecord`]
//! whose config hash is invariant under key reordering of the source config.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::covariance::{self, CovarianceRepr};
use crate::error::{Error, Result};
use crate::filter::Belief;
use crate::observer::{self, ToyDecoder};
use crate::{linalg, rng};

/// Version stamp written into every exported metrics file.
pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// Parameter norm beyond which a baseline run is declared divergent.
pub const DIVERGENCE_NORM: f64 = 1e8;

/// Floor on the scalar observation noise used by the filtering learner so
/// the innovation covariance stays invertible on noiseless tasks.
pub const R_FLOOR: f64 = 1e-10;

/// Observation noise standard deviation baked into the continual protocol.
pub const CONTINUAL_NOISE: f64 = 0.05;

/// Held-out points per task for continual evaluation.
pub const CONTINUAL_EVAL_POINTS: usize = 64;

/// Beliefs wider than this dimension skip the dense contraction audit.
pub const BENCH_AUDIT_DIM: usize = 64;

// ---------------------------------------------------------------------------
// Tasks
// ---------------------------------------------------------------------------

/// Synthetic task family. All data is generated from the run seed; sizes are
/// validated so a full run stays at desk scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TaskSpec {
    LinearRegression { d: usize, t: usize, noise: f64 },
    LogisticRegression { d: usize, t: usize },
    DriftingRegression { d: usize, t: usize, drift_rate: f64 },
    PermutedFeatures { d: usize, tasks: usize, t_per_task: usize },
    TeacherStream { hidden_dim: usize, vocab: usize, t: usize },
}

impl TaskSpec {
    pub fn name(&self) -> &'static str {
        match self {
            TaskSpec::LinearRegression { .. } => "linear-regression",
            TaskSpec::LogisticRegression { .. } => "logistic-regression",
            TaskSpec::DriftingRegression { .. } => "drifting-regression",
            TaskSpec::PermutedFeatures { .. } => "permuted-features",
            TaskSpec::TeacherStream { .. } => "teacher-stream",
        }
    }

    /// Reject degenerate or beyond-desk-scale sizes before any compute.
    pub fn validate(&self) -> Result<()> {
        let (dim, steps) = match *self {
            TaskSpec::LinearRegression { d, t, noise } => {
                if !(noise.is_finite() && noise >= 0.0) {
                    return Err(Error::invalid("TaskSpec", "noise must be finite and >= 0"));
                }
                (d, t)
            }
            TaskSpec::LogisticRegression { d, t } => (d, t),
            TaskSpec::DriftingRegression { d, t, drift_rate } => {
                if !(drift_rate.is_finite() && drift_rate >= 0.0) {
                    return Err(Error::invalid("TaskSpec", "drift_rate must be finite and >= 0"));
                }
                (d, t)
            }
            TaskSpec::PermutedFeatures { d, tasks, t_per_task } => {
                if tasks == 0 || tasks > 64 {
                    return Err(Error::invalid("TaskSpec", "tasks must be in 1..=64"));
                }
                (d, tasks * t_per_task)
            }
            TaskSpec::TeacherStream { hidden_dim, vocab, t } => {
                if vocab < 2 || vocab > 4096 {
                    return Err(Error::invalid("TaskSpec", "vocab must be in 2..=4096"));
                }
                (hidden_dim, t)
            }
        };
        if dim == 0 || dim > 1 << 20 {
            return Err(Error::invalid("TaskSpec", "dimension must be in 1..=2^20"));
        }
        if steps == 0 || steps > 1 << 20 {
            return Err(Error::invalid("TaskSpec", "total steps must be in 1..=2^20"));
        }
        Ok(())
    }
}

/// Scalar-observation task shape: which likelihood links `theta . x` to `y`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Regression,
    Logistic,
}

/// A fully materialized scalar-target stream with step-indexed ground truth.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub kind: TaskKind,
    pub inputs: Vec<DVector<f64>>,
    pub targets: Vec<f64>,
    /// True parameter at each step (constant for stationary tasks).
    pub theta: Vec<DVector<f64>>,
    /// Observation noise standard deviation used during generation.
    pub noise: f64,
}

/// Generate the scalar-target stream for a task. Teacher streams are token
/// sequences and are handled by the training loops directly.
pub fn generate_dataset(task: &TaskSpec, seed: u64) -> Result<Dataset> {
    task.validate()?;
    let base = rng::child_seed(seed, "task-data");
    match *task {
        TaskSpec::LinearRegression { d, t, noise } => {
            let theta0 = rng::standard_normal_vector(&mut rng::stream(base, 0, 0), d);
            let mut inputs = Vec::with_capacity(t);
            let mut targets = Vec::with_capacity(t);
            let mut theta = Vec::with_capacity(t);
            for step in 0..t {
                let x = rng::standard_normal_vector(&mut rng::stream(base, step as u64, 1), d);
                let v: f64 = rng::stream(base, step as u64, 2).random::<f64>();
                let n = gauss_from_uniform(v, rng::stream(base, step as u64, 2).random());
                targets.push(theta0.dot(&x) + noise * n);
                inputs.push(x);
                theta.push(theta0.clone());
            }
            Ok(Dataset { kind: TaskKind::Regression, inputs, targets, theta, noise })
        }
        TaskSpec::LogisticRegression { d, t } => {
            let theta0 = rng::standard_normal_vector(&mut rng::stream(base, 0, 0), d);
            let mut inputs = Vec::with_capacity(t);
            let mut targets = Vec::with_capacity(t);
            let mut theta = Vec::with_capacity(t);
            for step in 0..t {
                let x = rng::standard_normal_vector(&mut rng::stream(base, step as u64, 1), d);
                let p = sigmoid(theta0.dot(&x));
                let u: f64 = rng::stream(base, step as u64, 2).random();
                targets.push(if u < p { 1.0 } else { 0.0 });
                inputs.push(x);
                theta.push(theta0.clone());
            }
            Ok(Dataset { kind: TaskKind::Logistic, inputs, targets, theta, noise: 0.0 })
        }
        TaskSpec::DriftingRegression { d, t, drift_rate } => {
            let mut theta_t = rng::standard_normal_vector(&mut rng::stream(base, 0, 0), d);
            let noise = CONTINUAL_NOISE;
            let mut inputs = Vec::with_capacity(t);
            let mut targets = Vec::with_capacity(t);
            let mut theta = Vec::with_capacity(t);
            for step in 0..t {
                let x = rng::standard_normal_vector(&mut rng::stream(base, step as u64, 1), d);
                let n = rng::standard_normal_vector(&mut rng::stream(base, step as u64, 2), 1)[0];
                targets.push(theta_t.dot(&x) + noise * n);
                inputs.push(x);
                theta.push(theta_t.clone());
                let w = rng::standard_normal_vector(&mut rng::stream(base, step as u64, 3), d);
                theta_t += drift_rate * w;
            }
            Ok(Dataset { kind: TaskKind::Regression, inputs, targets, theta, noise })
        }
        TaskSpec::PermutedFeatures { .. } => {
            let continual = generate_continual(task, seed)?;
            let mut inputs = Vec::new();
            let mut targets = Vec::new();
            let mut theta = Vec::new();
            for t in continual.tasks {
                inputs.extend(t.inputs);
                targets.extend(t.targets);
                theta.extend(t.theta);
            }
            Ok(Dataset {
                kind: TaskKind::Regression,
                inputs,
                targets,
                theta,
                noise: CONTINUAL_NOISE,
            })
        }
        TaskSpec::TeacherStream { .. } => Err(Error::invalid(
            "generate_dataset",
            "teacher streams are token sequences; use the training loops directly",
        )),
    }
}

/// Per-task training streams and held-out (noiseless) evaluation sets for the
/// permuted-features protocol.
#[derive(Clone, Debug)]
pub struct ContinualData {
    pub tasks: Vec<Dataset>,
    pub eval_sets: Vec<Dataset>,
}

/// Permuted-features generator: one ground-truth parameter, one feature
/// permutation per task (task 0 is the identity).
pub fn generate_continual(task: &TaskSpec, seed: u64) -> Result<ContinualData> {
    let TaskSpec::PermutedFeatures { d, tasks, t_per_task } = *task else {
        return Err(Error::invalid(
            "generate_continual",
            "continual evaluation requires a permuted-features task",
        ));
    };
    task.validate()?;
    let base = rng::child_seed(seed, "continual");
    let theta_star = rng::standard_normal_vector(&mut rng::stream(base, 0, 0), d);
    let mut out = ContinualData { tasks: Vec::new(), eval_sets: Vec::new() };
    for k in 0..tasks {
        let mut perm: Vec<usize> = (0..d).collect();
        if k > 0 {
            perm.shuffle(&mut rng::stream(base, k as u64, 1));
        }
        // Effective parameter seen through the permuted features:
        // y = sum_i theta*[i] x[perm[i]] = theta_k . x with theta_k[perm[i]] = theta*[i].
        let mut theta_k = DVector::zeros(d);
        for i in 0..d {
            theta_k[perm[i]] = theta_star[i];
        }
        let mut train = Dataset {
            kind: TaskKind::Regression,
            inputs: Vec::with_capacity(t_per_task),
            targets: Vec::with_capacity(t_per_task),
            theta: Vec::with_capacity(t_per_task),
            noise: CONTINUAL_NOISE,
        };
        for step in 0..t_per_task {
            let idx = (k * t_per_task + step) as u64;
            let x = rng::standard_normal_vector(&mut rng::stream(base, idx, 2), d);
            let n = rng::standard_normal_vector(&mut rng::stream(base, idx, 3), 1)[0];
            train.targets.push(theta_k.dot(&x) + CONTINUAL_NOISE * n);
            train.inputs.push(x);
            train.theta.push(theta_k.clone());
        }
        let mut eval = Dataset {
            kind: TaskKind::Regression,
            inputs: Vec::with_capacity(CONTINUAL_EVAL_POINTS),
            targets: Vec::with_capacity(CONTINUAL_EVAL_POINTS),
            theta: Vec::with_capacity(CONTINUAL_EVAL_POINTS),
            noise: 0.0,
        };
        for step in 0..CONTINUAL_EVAL_POINTS {
            let x = rng::standard_normal_vector(&mut rng::stream(base, step as u64, 4 + k as u64), d);
            eval.targets.push(theta_k.dot(&x));
            eval.inputs.push(x);
            eval.theta.push(theta_k.clone());
        }
        out.tasks.push(train);
        out.eval_sets.push(eval);
    }
    Ok(out)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Box-Muller from two uniforms; keeps data generation a pure function of
/// the counters even when only one normal draw is needed.
fn gauss_from_uniform(u1: f64, u2: f64) -> f64 {
    let u1 = u1.max(1e-300);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn predict_scalar(kind: TaskKind, theta: &DVector<f64>, x: &DVector<f64>) -> f64 {
    match kind {
        TaskKind::Regression => theta.dot(x),
        TaskKind::Logistic => sigmoid(theta.dot(x)),
    }
}

fn scalar_loss(kind: TaskKind, pred: f64, y: f64) -> f64 {
    match kind {
        TaskKind::Regression => 0.5 * (pred - y) * (pred - y),
        TaskKind::Logistic => {
            let p = pred.clamp(1e-12, 1.0 - 1e-12);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        }
    }
}

/// Gradient of the per-example loss at `theta`; for both likelihoods this is
/// `(prediction - y) x`.
fn scalar_grad(kind: TaskKind, theta: &DVector<f64>, x: &DVector<f64>, y: f64) -> DVector<f64> {
    (predict_scalar(kind, theta, x) - y) * x
}

// ---------------------------------------------------------------------------
// Run records and config hashing
// ---------------------------------------------------------------------------

/// One per-step log entry. `contraction_rho` and `lyapunov` are populated
/// only when the belief is at audit scale / ground truth is known.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepEntry {
    pub step: u64,
    pub loss: f64,
    pub innovation_norm: f64,
    pub gain_norm: f64,
    pub contraction_rho: Option<f64>,
    pub lyapunov: Option<f64>,
    pub wall_seconds: f64,
}

/// Append-only per-run log plus final metrics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub run_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub task: String,
    pub learner: String,
    pub entries: Vec<StepEntry>,
    pub final_metrics: BTreeMap<String, f64>,
}

impl RunRecord {
    fn new(config: &toml::Value, seed: u64, task: &str, learner: &str) -> Self {
        let hash = config_hash_hex(config);
        RunRecord {
            schema_version: METRICS_SCHEMA_VERSION,
            run_id: format!("{hash}-s{seed}"),
            config_hash: hash,
            seed,
            task: task.to_string(),
            learner: learner.to_string(),
            entries: Vec::new(),
            final_metrics: BTreeMap::new(),
        }
    }

    /// Append a step entry. Entries are never mutated or removed.
    pub fn push(&mut self, entry: StepEntry) {
        self.entries.push(entry);
    }

    /// Equality of everything except wall-clock timings.
    pub fn same_results(&self, other: &RunRecord) -> bool {
        self.schema_version == other.schema_version
            && self.run_id == other.run_id
            && self.config_hash == other.config_hash
            && self.seed == other.seed
            && self.task == other.task
            && self.learner == other.learner
            && self.final_metrics == other.final_metrics
            && self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.step == b.step
                    && a.loss.to_bits() == b.loss.to_bits()
                    && a.innovation_norm.to_bits() == b.innovation_norm.to_bits()
                    && a.gain_norm.to_bits() == b.gain_norm.to_bits()
                    && opt_bits(a.contraction_rho) == opt_bits(b.contraction_rho)
                    && opt_bits(a.lyapunov) == opt_bits(b.lyapunov)
            })
    }

    pub fn mean_loss(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        self.entries.iter().map(|e| e.loss).sum::<f64>() / self.entries.len() as f64
    }
}

fn opt_bits(x: Option<f64>) -> Option<u64> {
    x.map(f64::to_bits)
}

/// Canonical text form of a config value: tables are emitted with sorted
/// keys so the hash is independent of key order in the source document.
pub fn canonical_toml(value: &toml::Value) -> String {
    let mut out = String::new();
    write_canonical(value, &mut out);
    out
}

fn write_canonical(value: &toml::Value, out: &mut String) {
    match value {
        toml::Value::String(s) => {
            let _ = write!(out, "s{}:{s}", s.len());
        }
        toml::Value::Integer(i) => {
            let _ = write!(out, "i{i}");
        }
        toml::Value::Float(f) => {
            let _ = write!(out, "f{:016x}", f.to_bits());
        }
        toml::Value::Boolean(b) => {
            let _ = write!(out, "b{b}");
        }
        toml::Value::Datetime(dt) => {
            let _ = write!(out, "d{dt}");
        }
        toml::Value::Array(items) => {
            out.push('[');
            for item in items {
                write_canonical(item, out);
                out.push(',');
            }
            out.push(']');
        }
        toml::Value::Table(table) => {
            let mut keys: Vec<&String> = table.keys().collect();
            keys.sort();
            out.push('{');
            for key in keys {
                let _ = write!(out, "k{}:{key}=", key.len());
                write_canonical(&table[key], out);
                out.push(',');
            }
            out.push('}');
        }
    }
}

/// FNV-1a hash of the canonical form; stable under key reordering.
pub fn config_hash(value: &toml::Value) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for byte in canonical_toml(value).as_bytes() {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn config_hash_hex(value: &toml::Value) -> String {
    format!("{:016x}", config_hash(value))
}

fn run_config(task: &TaskSpec, learner_name: &str, learner: toml::Value) -> Result<toml::Value> {
    let task_value = toml::Value::try_from(task)
        .map_err(|e| Error::Config(format!("task serialization failed: {e}")))?;
    let mut table = toml::value::Table::new();
    table.insert("task".to_string(), task_value);
    table.insert("learner_kind".to_string(), toml::Value::String(learner_name.to_string()));
    table.insert("learner".to_string(), learner);
    Ok(toml::Value::Table(table))
}

// ---------------------------------------------------------------------------
// Learners
// ---------------------------------------------------------------------------

/// Covariance structure for the filtering learner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "repr", rename_all = "kebab-case")]
pub enum CovSpec {
    Dense,
    LowRank { rank: usize },
}

/// Filtering learner: EKF over the parameter vector with an identity
/// transition and isotropic diffusion `process_noise * I`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterLearnerSpec {
    pub sigma0_sq: f64,
    pub process_noise: f64,
    pub covariance: CovSpec,
}

impl Default for FilterLearnerSpec {
    fn default() -> Self {
        FilterLearnerSpec {
            sigma0_sq: 1.0,
            process_noise: 0.0,
            covariance: CovSpec::Dense,
        }
    }
}

/// First-order baseline update rules (standard formulations; adaptive
/// moments uses bias correction).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum Optimizer {
    PlainSgd { lr: f64 },
    Momentum { lr: f64, beta: f64 },
    AdaptiveMoments { lr: f64, beta1: f64, beta2: f64, epsilon: f64 },
}

impl Optimizer {
    pub fn name(&self) -> &'static str {
        match self {
            Optimizer::PlainSgd { .. } => "plain-sgd",
            Optimizer::Momentum { .. } => "momentum",
            Optimizer::AdaptiveMoments { .. } => "adaptive-moments",
        }
    }
}

/// Either learner family, for protocols that treat them uniformly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum LearnerSpec {
    Filtering(FilterLearnerSpec),
    Baseline(Optimizer),
}

impl LearnerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LearnerSpec::Filtering(_) => "filtering",
            LearnerSpec::Baseline(opt) => opt.name(),
        }
    }
}

enum LearnerState {
    Filtering {
        belief: Belief,
        process_noise: f64,
    },
    Baseline {
        theta: DVector<f64>,
        momentum: DVector<f64>,
        second_moment: DVector<f64>,
        t: u64,
        opt: Optimizer,
        diverged: bool,
    },
}

struct StepInfo {
    loss: f64,
    innovation_norm: f64,
    gain_norm: f64,
    contraction_rho: Option<f64>,
}

impl LearnerState {
    fn new(spec: &LearnerSpec, d: usize) -> Self {
        match spec {
            LearnerSpec::Filtering(f) => {
                let cov = match f.covariance {
                    CovSpec::Dense => CovarianceRepr::isotropic(d, f.sigma0_sq),
                    CovSpec::LowRank { rank } => CovarianceRepr::LowRankPlusDiagonal {
                        u: DMatrix::zeros(d, rank.min(d)),
                        delta: f.sigma0_sq,
                    },
                };
                LearnerState::Filtering {
                    belief: Belief {
                        mean: DVector::zeros(d),
                        cov,
                        step: 0,
                    },
                    process_noise: f.process_noise,
                }
            }
            LearnerSpec::Baseline(opt) => LearnerState::Baseline {
                theta: DVector::zeros(d),
                momentum: DVector::zeros(d),
                second_moment: DVector::zeros(d),
                t: 0,
                opt: opt.clone(),
                diverged: false,
            },
        }
    }

    fn mean(&self) -> &DVector<f64> {
        match self {
            LearnerState::Filtering { belief, .. } => &belief.mean,
            LearnerState::Baseline { theta, .. } => theta,
        }
    }

    fn diverged(&self) -> bool {
        match self {
            LearnerState::Filtering { .. } => false,
            LearnerState::Baseline { diverged, .. } => *diverged,
        }
    }

    fn eval_loss(&self, kind: TaskKind, x: &DVector<f64>, y: f64) -> f64 {
        scalar_loss(kind, predict_scalar(kind, self.mean(), x), y)
    }

    /// One online training step on `(x, y)`. `noise` is the task's
    /// observation noise level (filtering uses it for R). Returns the loss
    /// of the pre-update prediction.
    fn train_step(
        &mut self,
        kind: TaskKind,
        x: &DVector<f64>,
        y: f64,
        noise: f64,
        frozen: bool,
        compute_rho: bool,
    ) -> Result<StepInfo> {
        let pred = predict_scalar(kind, self.mean(), x);
        let loss = scalar_loss(kind, pred, y);
        if frozen {
            return Ok(StepInfo {
                loss,
                innovation_norm: (pred - y).abs(),
                gain_norm: 0.0,
                contraction_rho: None,
            });
        }
        match self {
            LearnerState::Filtering { belief, process_noise } => {
                // Identity transition with isotropic diffusion; applied in
                // place to avoid materializing A and Q at large d.
                if *process_noise > 0.0 {
                    match &mut belief.cov {
                        CovarianceRepr::Dense(p) => {
                            for i in 0..p.nrows() {
                                p[(i, i)] += *process_noise;
                            }
                        }
                        CovarianceRepr::LowRankPlusDiagonal { delta, .. } => {
                            *delta += *process_noise;
                        }
                        other => {
                            let d = other.dim();
                            let a = DMatrix::identity(d, d);
                            let q = DMatrix::from_diagonal_element(d, d, *process_noise);
                            belief.cov = covariance::predict_cov(other, &a, &q)?;
                        }
                    }
                }
                let h = match kind {
                    TaskKind::Regression => DMatrix::from_fn(1, x.len(), |_, j| x[j]),
                    TaskKind::Logistic => {
                        let slope = pred * (1.0 - pred);
                        DMatrix::from_fn(1, x.len(), |_, j| slope * x[j])
                    }
                };
                let r_scalar = match kind {
                    TaskKind::Regression => (noise * noise).max(R_FLOOR),
                    TaskKind::Logistic => (pred * (1.0 - pred)).max(1e-3),
                };
                let r = DMatrix::from_element(1, 1, r_scalar);
                let g = covariance::gain(&belief.cov, &h, &r)?;
                let innovation = y - pred;
                belief.mean += &g.k * DVector::from_element(1, innovation);
                belief.cov = covariance::measurement_update(&belief.cov, &g.k, &h, &r)?;
                belief.step += 1;
                Ok(StepInfo {
                    loss,
                    innovation_norm: innovation.abs(),
                    gain_norm: g.k.norm(),
                    contraction_rho: if compute_rho {
                        g.contraction.as_ref().map(linalg::spectral_radius)
                    } else {
                        None
                    },
                })
            }
            LearnerState::Baseline {
                theta,
                momentum,
                second_moment,
                t,
                opt,
                diverged,
            } => {
                let grad = scalar_grad(kind, theta, x, y);
                *t += 1;
                match *opt {
                    Optimizer::PlainSgd { lr } => {
                        *theta -= lr * &grad;
                    }
                    Optimizer::Momentum { lr, beta } => {
                        *momentum = beta * &*momentum + &grad;
                        *theta -= lr * &*momentum;
                    }
                    Optimizer::AdaptiveMoments { lr, beta1, beta2, epsilon } => {
                        *momentum = beta1 * &*momentum + (1.0 - beta1) * &grad;
                        *second_moment =
                            beta2 * &*second_moment + (1.0 - beta2) * grad.component_mul(&grad);
                        let m_hat = &*momentum / (1.0 - beta1.powi(*t as i32));
                        let v_hat = &*second_moment / (1.0 - beta2.powi(*t as i32));
                        for i in 0..theta.len() {
                            theta[i] -= lr * m_hat[i] / (v_hat[i].sqrt() + epsilon);
                        }
                    }
                }
                if !theta.iter().all(|v| v.is_finite()) || theta.norm() > DIVERGENCE_NORM {
                    *diverged = true;
                }
                Ok(StepInfo {
                    loss,
                    innovation_norm: (pred - y).abs(),
                    gain_norm: 0.0,
                    contraction_rho: None,
                })
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

/// Train the filtering learner on a task for `steps` online steps (the data
/// stream is cycled if `steps` exceeds its length). Deterministic given
/// `(task, spec, steps, seed)`.
pub fn train_filtering(
    task: &TaskSpec,
    spec: &FilterLearnerSpec,
    steps: usize,
    seed: u64,
) -> Result<RunRecord> {
    let learner_value = toml::Value::try_from(spec)
        .map_err(|e| Error::Config(format!("learner serialization failed: {e}")))?;
    let config = run_config(task, "filtering", learner_value)?;
    let mut record = RunRecord::new(&config, seed, task.name(), "filtering");

    if let TaskSpec::TeacherStream { hidden_dim, vocab, t } = *task {
        task.validate()?;
        return train_teacher_stream(record, hidden_dim, vocab, t.min(steps), seed, spec);
    }

    let data = generate_dataset(task, seed)?;
    let d = data.inputs[0].len();
    let mut state = LearnerState::new(&LearnerSpec::Filtering(spec.clone()), d);
    let audit = d <= BENCH_AUDIT_DIM;
    for step in 0..steps {
        let i = step % data.inputs.len();
        let t0 = Instant::now();
        let info = state.train_step(data.kind, &data.inputs[i], data.targets[i], data.noise, false, audit)?;
        let wall = t0.elapsed().as_secs_f64();
        let lyapunov = if audit {
            let e = state.mean() - &data.theta[i];
            match state {
                LearnerState::Filtering { ref belief, .. } => {
                    belief.cov.apply_inv(&e).ok().map(|w| e.dot(&w))
                }
                _ => None,
            }
        } else {
            None
        };
        record.push(StepEntry {
            step: step as u64,
            loss: info.loss,
            innovation_norm: info.innovation_norm,
            gain_norm: info.gain_norm,
            contraction_rho: info.contraction_rho,
            lyapunov,
            wall_seconds: wall,
        });
    }
    let last = data.theta.len() - 1;
    finalize_metrics(&mut record, Some((state.mean(), &data.theta[last])), state.diverged());
    Ok(record)
}

fn train_teacher_stream(
    mut record: RunRecord,
    hidden_dim: usize,
    vocab: usize,
    steps: usize,
    seed: u64,
    spec: &FilterLearnerSpec,
) -> Result<RunRecord> {
    let model = ToyDecoder::random(hidden_dim, vocab, rng::child_seed(seed, "decoder"));
    let stream = observer::generate_stream(&model, steps + 1, rng::child_seed(seed, "stream"))?;
    let inputs = &stream.tokens[..steps];
    let targets = &stream.tokens[1..=steps];
    let mut belief = Belief::isotropic(DVector::zeros(hidden_dim), spec.sigma0_sq);
    for (step, (&x, &y)) in inputs.iter().zip(targets).enumerate() {
        let t0 = Instant::now();
        let (s, predicted) = observer::decode_step(&model, &belief, x)?;
        let loss = -s[y].max(1e-300).ln();
        let mut e = -s.clone();
        e[y] += 1.0;
        belief = observer::innovation_correct(&model, &predicted, y, None)?;
        record.push(StepEntry {
            step: step as u64,
            loss,
            innovation_norm: e.norm(),
            gain_norm: 0.0,
            contraction_rho: None,
            lyapunov: None,
            wall_seconds: t0.elapsed().as_secs_f64(),
        });
    }
    finalize_metrics(&mut record, None, false);
    Ok(record)
}

/// Train a first-order baseline on a task; same logging shape as the
/// filtering learner. Divergence (non-finite or exploding parameters) stops
/// the run and sets `final_metrics["diverged"] = 1`.
pub fn train_baseline(
    task: &TaskSpec,
    optimizer: &Optimizer,
    steps: usize,
    seed: u64,
) -> Result<RunRecord> {
    if matches!(task, TaskSpec::TeacherStream { .. }) {
        return Err(Error::invalid(
            "train_baseline",
            "first-order baselines operate on scalar-target tasks, not token streams",
        ));
    }
    let learner_value = toml::Value::try_from(optimizer)
        .map_err(|e| Error::Config(format!("learner serialization failed: {e}")))?;
    let config = run_config(task, "baseline", learner_value)?;
    let mut record = RunRecord::new(&config, seed, task.name(), optimizer.name());
    let data = generate_dataset(task, seed)?;
    let d = data.inputs[0].len();
    let audit = false;
    let mut state = LearnerState::new(&LearnerSpec::Baseline(optimizer.clone()), d);
    for step in 0..steps {
        let i = step % data.inputs.len();
        let t0 = Instant::now();
        let info = state.train_step(data.kind, &data.inputs[i], data.targets[i], data.noise, false, audit)?;
        record.push(StepEntry {
            step: step as u64,
            loss: info.loss,
            innovation_norm: info.innovation_norm,
            gain_norm: info.gain_norm,
            contraction_rho: None,
            lyapunov: None,
            wall_seconds: t0.elapsed().as_secs_f64(),
        });
        if state.diverged() {
            break;
        }
    }
    let last = data.theta.len() - 1;
    finalize_metrics(&mut record, Some((state.mean(), &data.theta[last])), state.diverged());
    Ok(record)
}

fn finalize_metrics(
    record: &mut RunRecord,
    truth: Option<(&DVector<f64>, &DVector<f64>)>,
    diverged: bool,
) {
    let n = record.entries.len();
    let tail = n.min(10).max(1);
    let final_loss = if n == 0 {
        0.0
    } else {
        record.entries[n - tail..].iter().map(|e| e.loss).sum::<f64>() / tail as f64
    };
    record.final_metrics.insert("steps".into(), n as f64);
    record.final_metrics.insert("mean_loss".into(), record.mean_loss());
    record.final_metrics.insert("final_loss".into(), final_loss);
    record
        .final_metrics
        .insert("diverged".into(), if diverged { 1.0 } else { 0.0 });
    if let Some((estimate, theta)) = truth {
        record
            .final_metrics
            .insert("param_error".into(), (estimate - theta).norm());
        record.final_metrics.insert("param_norm".into(), estimate.norm());
    }
}

// ---------------------------------------------------------------------------
// Continual protocol
// ---------------------------------------------------------------------------

/// Forgetting / plasticity report for the permuted-features protocol.
#[derive(Clone, Debug)]
pub struct ContinualReport {
    /// Mean over tasks of (final loss - best checkpoint loss); larger = worse.
    pub forgetting: f64,
    /// Mean over tasks after the first of (loss before its training - loss
    /// right after its training).
    pub plasticity: f64,
    /// `curves[i][j]` = eval loss on task `i` after finishing task `i + j`.
    pub per_task_curves: Vec<Vec<f64>>,
    pub best_losses: Vec<f64>,
    pub final_losses: Vec<f64>,
}

/// Train a learner sequentially over permuted-feature tasks, checkpointing
/// held-out loss for every seen task at each task boundary.
///
/// `freeze_after`: stop updating parameters after this many tasks (used by
/// the degenerate-bound checks).
pub fn continual_eval(
    task: &TaskSpec,
    learner: &LearnerSpec,
    seed: u64,
    freeze_after: Option<usize>,
) -> Result<ContinualReport> {
    let data = generate_continual(task, seed)?;
    let d = data.tasks[0].inputs[0].len();
    let n_tasks = data.tasks.len();
    let mut state = LearnerState::new(learner, d);
    let mut curves: Vec<Vec<f64>> = vec![Vec::new(); n_tasks];
    let mut pre_losses = vec![0.0; n_tasks];

    for k in 0..n_tasks {
        let frozen = freeze_after.is_some_and(|n| k >= n);
        pre_losses[k] = mean_eval_loss(&state, &data.eval_sets[k]);
        let train = &data.tasks[k];
        for (x, &y) in train.inputs.iter().zip(&train.targets) {
            state.train_step(train.kind, x, y, train.noise, frozen, false)?;
        }
        for (i, curve) in curves.iter_mut().enumerate().take(k + 1) {
            curve.push(mean_eval_loss(&state, &data.eval_sets[i]));
        }
    }

    let best_losses: Vec<f64> = curves
        .iter()
        .map(|c| c.iter().copied().fold(f64::INFINITY, f64::min))
        .collect();
    let final_losses: Vec<f64> = curves.iter().map(|c| *c.last().unwrap()).collect();
    let forgetting = best_losses
        .iter()
        .zip(&final_losses)
        .map(|(b, f)| f - b)
        .sum::<f64>()
        / n_tasks as f64;
    let plasticity = if n_tasks > 1 {
        (1..n_tasks)
            .map(|i| pre_losses[i] - curves[i][0])
            .sum::<f64>()
            / (n_tasks - 1) as f64
    } else {
        0.0
    };
    Ok(ContinualReport {
        forgetting,
        plasticity,
        per_task_curves: curves,
        best_losses,
        final_losses,
    })
}

fn mean_eval_loss(state: &LearnerState, eval: &Dataset) -> f64 {
    let total: f64 = eval
        .inputs
        .iter()
        .zip(&eval.targets)
        .map(|(x, &y)| state.eval_loss(eval.kind, x, y))
        .sum();
    total / eval.inputs.len() as f64
}

// ---------------------------------------------------------------------------
// Metric export
// ---------------------------------------------------------------------------

/// Run summary mirrored into the structured key-value export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub run_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub task: String,
    pub learner: String,
    pub steps: u64,
    pub final_metrics: BTreeMap<String, f64>,
}

pub fn summarize(record: &RunRecord) -> RunSummary {
    RunSummary {
        schema_version: record.schema_version,
        run_id: record.run_id.clone(),
        config_hash: record.config_hash.clone(),
        seed: record.seed,
        task: record.task.clone(),
        learner: record.learner.clone(),
        steps: record.entries.len() as u64,
        final_metrics: record.final_metrics.clone(),
    }
}

const STEPS_HEADER: &str =
    "step,loss,innovation_norm,gain_norm,contraction_rho,lyapunov,wall_seconds";

/// Write per-step rows (`<run_id>.steps.csv`) and a summary document
/// (`<run_id>.summary.toml`) for each record into `dir`. An empty record set
/// produces a single header-only `steps.csv`. Returns the written paths.
pub fn export_metrics(records: &[RunRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let mut written = Vec::new();
    if records.is_empty() {
        let path = dir.join("steps.csv");
        write_file(&path, &format!("# schema_version={METRICS_SCHEMA_VERSION}\n{STEPS_HEADER}\n"))?;
        written.push(path);
        return Ok(written);
    }
    for record in records {
        let steps_path = dir.join(format!("{}.steps.csv", record.run_id));
        let mut body = format!("# schema_version={METRICS_SCHEMA_VERSION}\n{STEPS_HEADER}\n");
        for e in &record.entries {
            let _ = writeln!(
                body,
                "{},{},{},{},{},{},{}",
                e.step,
                fmt_f64(e.loss),
                fmt_f64(e.innovation_norm),
                fmt_f64(e.gain_norm),
                fmt_opt(e.contraction_rho),
                fmt_opt(e.lyapunov),
                fmt_f64(e.wall_seconds),
            );
        }
        write_file(&steps_path, &body)?;
        written.push(steps_path);

        let summary_path = dir.join(format!("{}.summary.toml", record.run_id));
        let summary = summarize(record);
        let text = toml::to_string_pretty(&summary)
            .map_err(|e| Error::Config(format!("summary serialization failed: {e}")))?;
        write_file(&summary_path, &text)?;
        written.push(summary_path);
    }
    Ok(written)
}

/// Re-import a summary document. Round trips bit-exactly with
/// [`export_metrics`] output.
pub fn import_summary(path: &Path) -> Result<RunSummary> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Re-import per-step rows written by [`export_metrics`].
pub fn import_steps(path: &Path) -> Result<Vec<StepEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.starts_with('#') || line == STEPS_HEADER || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Config(format!(
                "{}: expected 7 fields, got {}",
                path.display(),
                fields.len()
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|e| Error::Config(format!("{}: bad float {s:?}: {e}", path.display())))
        };
        let parse_opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                parse(s).map(Some)
            }
        };
        out.push(StepEntry {
            step: fields[0]
                .parse()
                .map_err(|e| Error::Config(format!("{}: bad step: {e}", path.display())))?,
            loss: parse(fields[1])?,
            innovation_norm: parse(fields[2])?,
            gain_norm: parse(fields[3])?,
            contraction_rho: parse_opt(fields[4])?,
            lyapunov: parse_opt(fields[5])?,
            wall_seconds: parse(fields[6])?,
        });
    }
    Ok(out)
}

fn fmt_f64(x: f64) -> String {
    // Shortest round-trip decimal form; `parse::<f64>` recovers the bits.
    format!("{x:?}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    f.write_all(content.as_bytes()).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}
