//! Activation-level innovation correction on a self-contained toy
//! autoregressive decoder: recurrent hidden-state dynamics, softmax token
//! emission, Kalman correction of the hidden state from observed tokens, and
//! robustness evaluation under token dropout.
//!
//! The decoder parameters are never touched by a correction; only the
//! running belief over the hidden state moves.

use nalgebra::{DMatrix, DVector};

use crate::covariance;
use crate::error::{Error, Result};
use crate::filter::Belief;
use crate::linalg;
use crate::model::{softmax, softmax_jacobian};
use crate::rng;

/// Regularizer added to the softmax covariance when building the default
/// observation noise.
pub const R_OBS_EPSILON: f64 = 1e-6;

/// Hidden-state nonlinearity of the toy decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Linear,
}

/// Minimal autoregressive decoder: `h_{t+1} = act(A h_t + embed[x_t] + b)`,
/// `y_t ~ softmax(W h_t)`.
#[derive(Clone, Debug)]
pub struct ToyDecoder {
    pub hidden_dim: usize,
    pub vocab: usize,
    /// Recurrent map, `d x d`.
    pub a: DMatrix<f64>,
    /// Token embedding table, `V x d` (one row per token).
    pub embed: DMatrix<f64>,
    pub bias: DVector<f64>,
    /// Emission matrix, `V x d`.
    pub w: DMatrix<f64>,
    pub activation: Activation,
    /// Process noise on the hidden state.
    pub q: DMatrix<f64>,
}

impl ToyDecoder {
    pub fn new(
        a: DMatrix<f64>,
        embed: DMatrix<f64>,
        bias: DVector<f64>,
        w: DMatrix<f64>,
        activation: Activation,
        q: DMatrix<f64>,
    ) -> Result<Self> {
        let d = a.nrows();
        let v = w.nrows();
        if a.ncols() != d || embed.ncols() != d || bias.len() != d || w.ncols() != d {
            return Err(Error::dims(
                "ToyDecoder::new",
                format!("hidden {d}"),
                format!(
                    "A {}x{}, embed {}x{}, b {}, W {}x{}",
                    a.nrows(),
                    a.ncols(),
                    embed.nrows(),
                    embed.ncols(),
                    bias.len(),
                    w.nrows(),
                    w.ncols()
                ),
            ));
        }
        if embed.nrows() != v {
            return Err(Error::dims(
                "ToyDecoder::new (vocab)",
                format!("{v}"),
                format!("{}", embed.nrows()),
            ));
        }
        linalg::require_psd(&q, "ToyDecoder::new (Q)")?;
        Ok(ToyDecoder {
            hidden_dim: d,
            vocab: v,
            a,
            embed,
            bias,
            w,
            activation,
            q,
        })
    }

    /// Seeded random decoder with bounded dynamics.
    pub fn random(hidden_dim: usize, vocab: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, 0, 0);
        let a = rng::standard_normal_matrix(&mut r, hidden_dim, hidden_dim)
            * (0.6 / (hidden_dim as f64).sqrt());
        let embed = rng::standard_normal_matrix(&mut r, vocab, hidden_dim) * 0.8;
        let bias = rng::standard_normal_vector(&mut r, hidden_dim) * 0.1;
        let w = rng::standard_normal_matrix(&mut r, vocab, hidden_dim) * 2.5;
        ToyDecoder {
            hidden_dim,
            vocab,
            a,
            embed,
            bias,
            w,
            activation: Activation::Tanh,
            q: DMatrix::from_diagonal_element(hidden_dim, hidden_dim, 4e-2),
        }
    }

    fn preactivation(&self, h: &DVector<f64>, token: usize) -> DVector<f64> {
        &self.a * h + self.embed.row(token).transpose() + &self.bias
    }

    /// `F(h, x_t)`.
    pub fn transition(&self, h: &DVector<f64>, token: usize) -> Result<DVector<f64>> {
        self.check_token(token)?;
        let pre = self.preactivation(h, token);
        Ok(match self.activation {
            Activation::Tanh => pre.map(f64::tanh),
            Activation::Linear => pre,
        })
    }

    /// Analytic Jacobian `F'(h, x_t) = diag(act'(pre)) A`.
    pub fn transition_jacobian(&self, h: &DVector<f64>, token: usize) -> Result<DMatrix<f64>> {
        self.check_token(token)?;
        Ok(match self.activation {
            Activation::Tanh => {
                let pre = self.preactivation(h, token);
                let gains = pre.map(|p| 1.0 - p.tanh().powi(2));
                DMatrix::from_diagonal(&gains) * &self.a
            }
            Activation::Linear => self.a.clone(),
        })
    }

    /// Predicted token distribution `softmax(W h)`.
    pub fn token_probabilities(&self, h: &DVector<f64>) -> DVector<f64> {
        softmax(&(&self.w * h))
    }

    /// Observation Jacobian `H = J_softmax(W h) W`.
    pub fn observation_jacobian(&self, h: &DVector<f64>) -> DMatrix<f64> {
        let s = self.token_probabilities(h);
        softmax_jacobian(&s) * &self.w
    }

    /// Estimated Lipschitz constant of the transition: maximum operator norm
    /// of `F'` over seeded probe states.
    pub fn lipschitz_estimate(&self, n_probes: usize, seed: u64) -> Result<f64> {
        let mut r = rng::stream(seed, 0, 7);
        let mut best: f64 = 0.0;
        for _ in 0..n_probes {
            let h = rng::standard_normal_vector(&mut r, self.hidden_dim);
            let token = (r.next_u64() % self.vocab as u64) as usize;
            let j = self.transition_jacobian(&h, token)?;
            best = best.max(linalg::operator_norm(&j));
        }
        Ok(best)
    }

    fn check_token(&self, token: usize) -> Result<()> {
        if token >= self.vocab {
            return Err(Error::invalid(
                "ToyDecoder",
                format!("token {token} out of vocabulary (V = {})", self.vocab),
            ));
        }
        Ok(())
    }
}

use rand::RngCore;

/// Default observation covariance for token innovations:
/// `diag(s) - s s^T + eps I`.
pub fn default_r_obs(s: &DVector<f64>) -> DMatrix<f64> {
    let v = s.len();
    DMatrix::from_diagonal(s) - s * s.transpose()
        + DMatrix::from_diagonal_element(v, v, R_OBS_EPSILON)
}

/// EKF prediction through the decoder dynamics driven by `token_in`, plus
/// the predicted token distribution.
pub fn decode_step(
    model: &ToyDecoder,
    belief: &Belief,
    token_in: usize,
) -> Result<(DVector<f64>, Belief)> {
    let mean = model.transition(&belief.mean, token_in)?;
    let j = model.transition_jacobian(&belief.mean, token_in)?;
    let cov = covariance::predict_cov(&belief.cov, &j, &model.q)?;
    let predicted = Belief {
        mean,
        cov,
        step: belief.step,
    };
    let s = model.token_probabilities(&predicted.mean);
    Ok((s, predicted))
}

/// Activation-level Kalman correction from an observed token:
/// `mu <- mu + K (e_y - s)` with `H = J_softmax(W mu) W`.
///
/// `r_obs` defaults to the regularized softmax covariance
/// [`default_r_obs`]. Decoder parameters are read-only.
pub fn innovation_correct(
    model: &ToyDecoder,
    predicted: &Belief,
    observed_token: usize,
    r_obs: Option<&DMatrix<f64>>,
) -> Result<Belief> {
    model.check_token(observed_token)?;
    let s = model.token_probabilities(&predicted.mean);
    let default_r;
    let r = match r_obs {
        Some(r) => {
            linalg::require_pd(r, "innovation_correct (R_obs)", 0.0)?;
            r
        }
        None => {
            default_r = default_r_obs(&s);
            &default_r
        }
    };
    let h = model.observation_jacobian(&predicted.mean);
    let mut innovation = -s;
    innovation[observed_token] += 1.0;

    let g = covariance::gain(&predicted.cov, &h, r)?;
    let mean = &predicted.mean + &g.k * &innovation;
    let cov = covariance::measurement_update(&predicted.cov, &g.k, &h, r)?;
    Ok(Belief {
        mean,
        cov,
        step: predicted.step + 1,
    })
}

/// Spectral radius of the corrected error dynamics `(I - K H) F'`.
pub fn observer_stability(
    f_jacobian: &DMatrix<f64>,
    k: &DMatrix<f64>,
    h: &DMatrix<f64>,
) -> f64 {
    let d = f_jacobian.nrows();
    let m = DMatrix::identity(d, d) - k * h;
    linalg::spectral_radius(&(m * f_jacobian))
}

/// A teacher-generated token stream with its hidden trajectory.
#[derive(Clone, Debug)]
pub struct TokenStream {
    pub tokens: Vec<usize>,
    pub hidden: Vec<DVector<f64>>,
    pub seed: u64,
}

/// Generate `steps + 1` tokens by rolling the decoder forward with process
/// noise drawn from its own `Q` and sampling each token from its softmax
/// distribution.
pub fn generate_stream(model: &ToyDecoder, steps: usize, seed: u64) -> Result<TokenStream> {
    let q_sqrt = linalg::psd_sqrt(&model.q);
    let mut h = DVector::zeros(model.hidden_dim);
    let mut tokens = Vec::with_capacity(steps + 1);
    let mut hidden = Vec::with_capacity(steps + 1);
    let mut token = sample_token(&model.token_probabilities(&h), seed, 0)?;
    tokens.push(token);
    hidden.push(h.clone());
    for t in 0..steps {
        let mut noise_rng = rng::stream(seed, t as u64, 4);
        h = model.transition(&h, token)? + rng::gaussian_with_sqrt(&mut noise_rng, &q_sqrt);
        let s = model.token_probabilities(&h);
        token = sample_token(&s, seed, 1 + t as u64)?;
        tokens.push(token);
        hidden.push(h.clone());
    }
    Ok(TokenStream { tokens, hidden, seed })
}

fn sample_token(s: &DVector<f64>, seed: u64, step: u64) -> Result<usize> {
    let mut r = rng::stream(seed, step, 2);
    let u = (r.next_u64() as f64) / (u64::MAX as f64);
    let mut acc = 0.0;
    for (i, &p) in s.iter().enumerate() {
        acc += p;
        if u <= acc {
            return Ok(i);
        }
    }
    Ok(s.len() - 1)
}

/// Replace each token with a uniformly random one with probability `p`
/// (token dropout), deterministically per seed.
pub fn dropout_tokens(tokens: &[usize], vocab: usize, p: f64, seed: u64) -> Vec<usize> {
    tokens
        .iter()
        .enumerate()
        .map(|(t, &tok)| {
            let mut r = rng::stream(seed, t as u64, 3);
            let u = (r.next_u64() as f64) / (u64::MAX as f64);
            if u < p {
                (r.next_u64() % vocab as u64) as usize
            } else {
                tok
            }
        })
        .collect()
}

/// Average next-token negative log-likelihood of `targets` when the observer
/// is driven by `inputs`; with correction enabled, the belief is corrected
/// by each observed target token after scoring it.
pub fn stream_nll(
    model: &ToyDecoder,
    inputs: &[usize],
    targets: &[usize],
    sigma0_sq: f64,
    with_correction: bool,
) -> Result<f64> {
    if inputs.len() != targets.len() {
        return Err(Error::dims(
            "stream_nll",
            format!("{}", inputs.len()),
            format!("{}", targets.len()),
        ));
    }
    let mut belief = Belief::isotropic(DVector::zeros(model.hidden_dim), sigma0_sq);
    let mut total = 0.0;
    for (&x, &y) in inputs.iter().zip(targets) {
        let (s, predicted) = decode_step(model, &belief, x)?;
        total -= s[y].max(1e-300).ln();
        belief = if with_correction {
            innovation_correct(model, &predicted, y, None)?
        } else {
            Belief {
                step: predicted.step + 1,
                ..predicted
            }
        };
    }
    Ok(total / targets.len() as f64)
}

/// Paired clean/perturbed NLL table for one seed.
#[derive(Clone, Debug)]
pub struct RobustnessTable {
    pub clean_uncorrected: f64,
    pub clean_corrected: f64,
    pub perturbed_uncorrected: f64,
    pub perturbed_corrected: f64,
}

/// Teacher-student robustness protocol: a frozen teacher generates a token
/// stream; the observer decodes it with inputs corrupted by token dropout
/// `p`, scored on the true next tokens, with and without innovation
/// correction.
pub fn shift_robustness_eval(
    model: &ToyDecoder,
    steps: usize,
    dropout_p: f64,
    seed: u64,
) -> Result<RobustnessTable> {
    let stream = generate_stream(model, steps, seed)?;
    let inputs: Vec<usize> = stream.tokens[..steps].to_vec();
    let targets: Vec<usize> = stream.tokens[1..].to_vec();
    let perturbed = dropout_tokens(&inputs, model.vocab, dropout_p, rng::child_seed(seed, "dropout"));
    Ok(RobustnessTable {
        clean_uncorrected: stream_nll(model, &inputs, &targets, 1.0, false)?,
        clean_corrected: stream_nll(model, &inputs, &targets, 1.0, true)?,
        perturbed_uncorrected: stream_nll(model, &perturbed, &targets, 1.0, false)?,
        perturbed_corrected: stream_nll(model, &perturbed, &targets, 1.0, true)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::CovarianceRepr;
    use nalgebra::{dmatrix, dvector};

    fn decoder() -> ToyDecoder {
        ToyDecoder::random(6, 8, 1234)
    }

    #[test]
    fn uniform_probabilities_with_zero_emission() {
        let mut m = decoder();
        m.w = DMatrix::zeros(m.vocab, m.hidden_dim);
        let s = m.token_probabilities(&DVector::zeros(m.hidden_dim));
        for &p in s.iter() {
            assert!((p - 1.0 / m.vocab as f64).abs() < 1e-14);
        }
    }

    #[test]
    fn saturated_emission_is_one_hot() {
        let d = 4;
        let mut m = ToyDecoder::random(d, d, 5);
        m.w = DMatrix::identity(d, d) * 50.0;
        let mut h = DVector::zeros(d);
        h[2] = 1.0;
        let s = m.token_probabilities(&h);
        assert!(s[2] > 0.999999);
    }

    #[test]
    fn linear_prediction_covariance_hand_value() {
        // F = 0.5 I, Sigma_0 = I, Q = 0 -> Sigma_pred = 0.25 I
        let d = 3;
        let m = ToyDecoder::new(
            DMatrix::from_diagonal_element(d, d, 0.5),
            DMatrix::zeros(2, d),
            DVector::zeros(d),
            DMatrix::zeros(2, d),
            Activation::Linear,
            DMatrix::zeros(d, d),
        )
        .unwrap();
        let belief = Belief::isotropic(DVector::zeros(d), 1.0);
        let (_, predicted) = decode_step(&m, &belief, 0).unwrap();
        let p = covariance::densify(&predicted.cov).unwrap();
        assert!((p - DMatrix::from_diagonal_element(d, d, 0.25)).norm() < 1e-12);
    }

    #[test]
    fn observation_jacobian_matches_finite_differences() {
        let m = decoder();
        let mut r = rng::stream(2, 0, 0);
        let h = rng::standard_normal_vector(&mut r, m.hidden_dim);
        let analytic = m.observation_jacobian(&h);
        let w = m.w.clone();
        let fd = crate::diff::jacobian_fd(
            &move |x: &DVector<f64>| softmax(&(&w * x)),
            &h,
        );
        assert!((analytic - fd).norm() < 1e-6);
    }

    #[test]
    fn near_one_hot_innovation_barely_corrects() {
        let d = 4;
        let mut m = ToyDecoder::random(d, d, 5);
        m.w = DMatrix::identity(d, d) * 60.0;
        let mut h = DVector::zeros(d);
        h[1] = 1.0;
        let belief = Belief::isotropic(h.clone(), 1.0);
        let corrected = innovation_correct(&m, &belief, 1, None).unwrap();
        assert!((corrected.mean - h).norm() <= 1e-6);
    }

    #[test]
    fn symmetric_two_class_correction_sign_pattern() {
        // V = 2, W = I, mu = 0: s = (1/2, 1/2); observing token 0 moves the
        // mean along W^T (e_0 - s) = (+1/2, -1/2)
        let m = ToyDecoder::new(
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
            DVector::zeros(2),
            DMatrix::identity(2, 2),
            Activation::Linear,
            DMatrix::zeros(2, 2),
        )
        .unwrap();
        let belief = Belief::isotropic(dvector![0.0, 0.0], 1.0);
        let corrected = innovation_correct(&m, &belief, 0, None).unwrap();
        assert!(corrected.mean[0] > 0.0);
        assert!(corrected.mean[1] < 0.0);
        assert!((corrected.mean[0] + corrected.mean[1]).abs() < 1e-12);
    }

    #[test]
    fn confident_belief_moves_less() {
        let m = decoder();
        let mut r = rng::stream(8, 0, 0);
        let mu = rng::standard_normal_vector(&mut r, m.hidden_dim);
        let mut last = f64::INFINITY;
        for &scale in &[1.0, 1e-2, 1e-4, 1e-6] {
            let belief = Belief::isotropic(mu.clone(), scale);
            let corrected = innovation_correct(&m, &belief, 3, None).unwrap();
            let movement = (corrected.mean - &mu).norm();
            assert!(movement < last, "movement must shrink with certainty");
            last = movement;
        }
    }

    #[test]
    fn huge_observation_noise_freezes_mean() {
        let m = decoder();
        let mu = DVector::zeros(m.hidden_dim);
        let belief = Belief::isotropic(mu.clone(), 1.0);
        let r_obs = DMatrix::from_diagonal_element(m.vocab, m.vocab, 1e12);
        let corrected = innovation_correct(&m, &belief, 0, Some(&r_obs)).unwrap();
        assert!((corrected.mean - mu).norm() < 1e-9);
    }

    #[test]
    fn small_noise_direction_is_natural_gradient() {
        // belief covariance sigma^2 (F_h + eps I)^{-1} with sigma^2 -> 0:
        // the correction aligns with (F_h + eps I)^{-1} W^T (e_y - s)
        let m = decoder();
        let mut r = rng::stream(4, 0, 0);
        let mu = rng::standard_normal_vector(&mut r, m.hidden_dim) * 0.2;
        let s = m.token_probabilities(&mu);
        let fisher = crate::geometry::fisher_categorical(&m.w, &s).unwrap();
        let eps = 1e-6 * fisher.f.trace() / m.hidden_dim as f64;
        let f_reg = &fisher.f
            + DMatrix::from_diagonal_element(m.hidden_dim, m.hidden_dim, eps);
        let f_inv = linalg::pd_inverse(&f_reg, "test", 1e16).unwrap();
        let belief = Belief {
            mean: mu.clone(),
            cov: CovarianceRepr::dense(&f_inv * 1e-6),
            step: 0,
        };
        let token = 2;
        let corrected = innovation_correct(&m, &belief, token, None).unwrap();
        let step = corrected.mean - &mu;
        let mut e = -s;
        e[token] += 1.0;
        let reference = &f_inv * m.w.transpose() * e;
        let cosine = step.dot(&reference) / (step.norm() * reference.norm());
        assert!(cosine >= 0.99, "cosine {cosine}");
    }

    #[test]
    fn correction_never_touches_parameters() {
        let m = decoder();
        let (a, w, embed, bias) = (m.a.clone(), m.w.clone(), m.embed.clone(), m.bias.clone());
        let mut belief = Belief::isotropic(DVector::zeros(m.hidden_dim), 1.0);
        for t in 0..10 {
            let (_, predicted) = decode_step(&m, &belief, t % m.vocab).unwrap();
            belief = innovation_correct(&m, &predicted, (t + 1) % m.vocab, None).unwrap();
        }
        assert_eq!(a, m.a);
        assert_eq!(w, m.w);
        assert_eq!(embed, m.embed);
        assert_eq!(bias, m.bias);
    }

    #[test]
    fn observer_stability_examples() {
        let k = dmatrix![0.5];
        let h = dmatrix![1.0];
        assert!(observer_stability(&dmatrix![0.0], &k, &h).abs() < 1e-14);
        assert!((observer_stability(&dmatrix![1.0], &k, &h) - 0.5).abs() < 1e-14);
    }

    #[test]
    fn innovation_zero_mean_under_model_distribution() {
        // sampled one-hot tokens from s have mean s, so e_y - s averages to
        // zero componentwise at Monte Carlo rate
        let m = decoder();
        let mut r = rng::stream(6, 0, 0);
        let h = rng::standard_normal_vector(&mut r, m.hidden_dim);
        let s = m.token_probabilities(&h);
        let n = 100_000;
        let mut mean = DVector::zeros(m.vocab);
        for i in 0..n {
            let tok = sample_token(&s, 99, i as u64).unwrap();
            let mut e = -s.clone();
            e[tok] += 1.0;
            mean += e;
        }
        mean /= n as f64;
        let bound = 3.0 / (n as f64).sqrt();
        for &c in mean.iter() {
            assert!(c.abs() <= bound, "component {c} exceeds {bound}");
        }
    }

    #[test]
    fn zero_perturbation_parity() {
        let m = decoder();
        let table = shift_robustness_eval(&m, 60, 0.0, 77).unwrap();
        // with p = 0 perturbed inputs equal clean inputs exactly
        assert_eq!(table.clean_uncorrected, table.perturbed_uncorrected);
        assert_eq!(table.clean_corrected, table.perturbed_corrected);
    }

    #[test]
    fn dropout_robustness_directional() {
        let m = decoder();
        let mut wins = 0;
        let seeds = 50;
        for seed in 0..seeds {
            let t = shift_robustness_eval(&m, 400, 0.1, 1000 + seed).unwrap();
            if t.perturbed_corrected < t.perturbed_uncorrected {
                wins += 1;
            }
        }
        assert!(wins * 10 >= seeds * 8, "wins {wins}/{seeds}");
    }

    #[test]
    fn lipschitz_estimate_finite() {
        let m = decoder();
        let l = m.lipschitz_estimate(20, 3).unwrap();
        assert!(l.is_finite() && l > 0.0);
    }
}
