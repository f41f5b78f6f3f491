//! Property tests: structural invariants that must hold for arbitrary
//! well-formed inputs, not just the seeded instances in the unit tests.

use kalman_learn::covariance::{self, CovarianceRepr};
use kalman_learn::{linalg, rng};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// Build a deterministic PD matrix from a seed: A A^T / d + floor I.
fn seeded_pd(seed: u64, d: usize, floor: f64) -> DMatrix<f64> {
    let mut r = rng::stream(seed, 0, 0);
    let a = rng::standard_normal_matrix(&mut r, d, d);
    linalg::symmetrized(&(&a * a.transpose() / d as f64 + DMatrix::identity(d, d) * floor))
}

fn seeded_obs(seed: u64, m: usize, d: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut r = rng::stream(seed, 0, 1);
    let h = rng::standard_normal_matrix(&mut r, m, d);
    let rv = DMatrix::from_diagonal_element(m, m, 0.5);
    (h, rv)
}

fn gain_gap(repr: &CovarianceRepr, h: &DMatrix<f64>, r: &DMatrix<f64>) -> f64 {
    let structured = covariance::gain(repr, h, r).unwrap();
    let dense = covariance::gain(
        &CovarianceRepr::dense(covariance::densify(repr).unwrap()),
        h,
        r,
    )
    .unwrap();
    let scale = dense.k.norm().max(1.0);
    (&structured.k - &dense.k).norm() / scale
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Block-diagonal gains agree with the densified-dense computation.
    #[test]
    fn block_diagonal_gain_matches_dense(seed in 0u64..1_000_000, nblocks in 1usize..4, bdim in 1usize..6, m in 1usize..4) {
        let blocks: Vec<DMatrix<f64>> = (0..nblocks)
            .map(|i| seeded_pd(seed ^ (i as u64).wrapping_mul(0x9e37), bdim, 0.05))
            .collect();
        let d = nblocks * bdim;
        let (h, r) = seeded_obs(seed, m, d);
        let repr = CovarianceRepr::BlockDiagonal(blocks);
        prop_assert!(gain_gap(&repr, &h, &r) < 1e-8);
    }

    /// Low-rank-plus-diagonal gains (Woodbury path) agree with dense.
    #[test]
    fn lowrank_gain_matches_dense(seed in 0u64..1_000_000, d in 2usize..64, rank in 1usize..5, m in 1usize..4) {
        let rank = rank.min(d);
        let mut rr = rng::stream(seed, 1, 0);
        let u = rng::standard_normal_matrix(&mut rr, d, rank);
        let repr = CovarianceRepr::LowRankPlusDiagonal { u, delta: 0.3 };
        let (h, r) = seeded_obs(seed, m, d);
        prop_assert!(gain_gap(&repr, &h, &r) < 1e-8);
    }

    /// Kronecker-pair gains (vec-trick path) agree with dense.
    #[test]
    fn kronecker_gain_matches_dense(seed in 0u64..1_000_000, da in 1usize..5, db in 1usize..5, m in 1usize..4) {
        let a = seeded_pd(seed ^ 0xa, da, 0.1);
        let b = seeded_pd(seed ^ 0xb, db, 0.1);
        let repr = CovarianceRepr::KroneckerPair { a, b };
        let (h, r) = seeded_obs(seed, m, da * db);
        prop_assert!(gain_gap(&repr, &h, &r) < 1e-8);
    }

    /// Woodbury identity: apply_inv of a low-rank representation inverts
    /// apply, for arbitrary factors and right-hand sides.
    #[test]
    fn woodbury_apply_inv_inverts_apply(seed in 0u64..1_000_000, d in 1usize..32, rank in 1usize..5) {
        let rank = rank.min(d);
        let mut rr = rng::stream(seed, 2, 0);
        let u = rng::standard_normal_matrix(&mut rr, d, rank);
        let repr = CovarianceRepr::LowRankPlusDiagonal { u, delta: 0.4 };
        let v = rng::standard_normal_vector(&mut rr, d);
        let roundtrip = repr.apply_inv(&repr.apply(&v).unwrap()).unwrap();
        prop_assert!((&roundtrip - &v).norm() < 1e-7 * v.norm().max(1.0));
    }

    /// Kronecker vec trick: (A (x) B) v computed blockwise equals the
    /// densified product.
    #[test]
    fn kronecker_apply_matches_dense(seed in 0u64..1_000_000, da in 1usize..5, db in 1usize..5) {
        let a = seeded_pd(seed ^ 0xc, da, 0.1);
        let b = seeded_pd(seed ^ 0xd, db, 0.1);
        let repr = CovarianceRepr::KroneckerPair { a: a.clone(), b: b.clone() };
        let mut rr = rng::stream(seed, 3, 0);
        let v = rng::standard_normal_vector(&mut rr, da * db);
        let fast = repr.apply(&v).unwrap();
        let dense = covariance::densify(&repr).unwrap() * &v;
        prop_assert!((&fast - &dense).norm() < 1e-9 * dense.norm().max(1.0));
    }

    /// Monotone information: a measurement never increases the posterior
    /// covariance (dense Joseph update is <= prior in the Loewner order).
    #[test]
    fn measurement_never_increases_covariance(seed in 0u64..1_000_000, d in 1usize..8, m in 1usize..4) {
        let p = seeded_pd(seed, d, 0.05);
        let (h, r) = seeded_obs(seed, m, d);
        let repr = CovarianceRepr::dense(p.clone());
        let gain = covariance::gain(&repr, &h, &r).unwrap();
        let post = covariance::densify(
            &covariance::measurement_update(&repr, &gain.k, &h, &r).unwrap(),
        )
        .unwrap();
        let diff = linalg::symmetrized(&(&p - &post));
        prop_assert!(linalg::min_eigenvalue(&diff) > -1e-9 * p.norm());
    }

    /// Contraction identity: I - K H = (I + P H^T R^-1 H)^-1 for the exact
    /// gain, over arbitrary PD covariances and observation maps.
    #[test]
    fn contraction_identity_holds(seed in 0u64..1_000_000, d in 1usize..8, m in 1usize..4) {
        let p = seeded_pd(seed, d, 0.05);
        let (h, r) = seeded_obs(seed, m, d);
        let gain = covariance::gain(&CovarianceRepr::dense(p.clone()), &h, &r).unwrap();
        let lhs = DMatrix::identity(d, d) - &gain.k * &h;
        let r_inv = r.clone().try_inverse().unwrap();
        let rhs = (DMatrix::identity(d, d) + &p * h.transpose() * r_inv * &h)
            .try_inverse()
            .unwrap();
        prop_assert!((&lhs - &rhs).norm() < 1e-8 * lhs.norm().max(1.0));
    }

    /// Posterior mean is invariant to the covariance representation: the
    /// same belief expressed dense or low-rank yields the same update.
    #[test]
    fn update_mean_representation_invariant(seed in 0u64..1_000_000, d in 2usize..16, rank in 1usize..4, m in 1usize..3) {
        let rank = rank.min(d);
        let mut rr = rng::stream(seed, 4, 0);
        let u = rng::standard_normal_matrix(&mut rr, d, rank);
        let lowrank = CovarianceRepr::LowRankPlusDiagonal { u, delta: 0.25 };
        let dense = CovarianceRepr::dense(covariance::densify(&lowrank).unwrap());
        let (h, r) = seeded_obs(seed, m, d);
        let mean = rng::standard_normal_vector(&mut rr, d);
        let y = rng::standard_normal_vector(&mut rr, m);
        let innovation = &y - &h * &mean;

        let k_low = covariance::gain(&lowrank, &h, &r).unwrap().k;
        let k_dense = covariance::gain(&dense, &h, &r).unwrap().k;
        let m_low = &mean + &k_low * &innovation;
        let m_dense = &mean + &k_dense * &innovation;
        prop_assert!((&m_low - &m_dense).norm() < 1e-8 * m_dense.norm().max(1.0));
    }
}

/// Non-proptest structural check kept alongside: densify of each family is
/// symmetric PSD by construction.
#[test]
fn densify_is_symmetric_psd() {
    let reprs = vec![
        CovarianceRepr::dense(seeded_pd(7, 5, 0.1)),
        CovarianceRepr::BlockDiagonal(vec![seeded_pd(8, 3, 0.1), seeded_pd(9, 2, 0.1)]),
        CovarianceRepr::LowRankPlusDiagonal {
            u: rng::standard_normal_matrix(&mut rng::stream(10, 0, 0), 6, 2),
            delta: 0.2,
        },
        CovarianceRepr::KroneckerPair {
            a: seeded_pd(11, 2, 0.1),
            b: seeded_pd(12, 3, 0.1),
        },
    ];
    for repr in &reprs {
        let p = covariance::densify(repr).unwrap();
        assert!((&p - &p.transpose()).norm() < 1e-12);
        assert!(linalg::min_eigenvalue(&p) > -1e-10);
    }
}

/// The counter-based RNG is reproducible and decorrelated across channels.
#[test]
fn rng_streams_reproducible_and_distinct() {
    let a: DVector<f64> = rng::standard_normal_vector(&mut rng::stream(1, 2, 3), 8);
    let b = rng::standard_normal_vector(&mut rng::stream(1, 2, 3), 8);
    let c = rng::standard_normal_vector(&mut rng::stream(1, 2, 4), 8);
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_ne!(rng::child_seed(5, "alpha"), rng::child_seed(5, "beta"));
}
