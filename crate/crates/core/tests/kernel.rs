use mogp_dfa::kernel::{
    assemble_covariance, auto_covariance, correlation_matrix, cross_correlation, cross_covariance,
    normalize_to_correlation, prior_correlation,
};
use mogp_dfa::linalg;
use mogp_dfa::quadrature::quadrature_oracle;
use mogp_dfa::{MogpHyperparams, TimeGrid};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn symmetric() -> MogpHyperparams {
    MogpHyperparams::uniform(2, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0).unwrap()
}

fn hp_strategy(k: usize) -> impl Strategy<Value = MogpHyperparams> {
    (
        prop::collection::vec(-2.0..2.0f64, k),
        prop::collection::vec(0.05..2.0f64, k),
        prop::collection::vec(0.3..8.0f64, k),
        prop::collection::vec(0.3..8.0f64, k),
        1e-4..0.5f64,
        prop::collection::vec(-1.0..1.0f64, k),
    )
        .prop_map(|(v0, v1, b0, b1, psi2, c)| MogpHyperparams::new(v0, v1, b0, b1, psi2, c).unwrap())
}

fn sorted_grid(q: usize) -> impl Strategy<Value = TimeGrid> {
    prop::collection::btree_set(0u32..1000, q)
        .prop_map(|s| TimeGrid::new(s.into_iter().map(|v| v as f64 / 999.0).collect()).unwrap())
}

#[test]
fn assembled_cross_block_matches_scalar_operation() {
    let hp = symmetric();
    let grid = TimeGrid::new(vec![0.0, 0.5]).unwrap();
    let s = assemble_covariance(&hp, &grid, 2).unwrap();
    // entry (1,3) one-based: factor 1 time 0 against factor 2 time 0
    assert!((s[(0, 2)] - cross_covariance(0, 1, 0.0, &hp).unwrap()).abs() < 1e-15);
    assert!((s[(1, 2)] - cross_covariance(0, 1, 0.5, &hp).unwrap()).abs() < 1e-15);
    assert!((s[(0, 1)] - auto_covariance(0, 0.5, &hp, false).unwrap()).abs() < 1e-15);
}

#[test]
fn normalized_symmetric_example_has_half_cross_block() {
    let hp = symmetric();
    let grid = TimeGrid::new(vec![0.0, 0.5]).unwrap();
    let r = normalize_to_correlation(&assemble_covariance(&hp, &grid, 2).unwrap(), 2, 2).unwrap();
    for d in 0..4 {
        assert!((r[(d, d)] - 1.0).abs() < 1e-12);
    }
    assert!((r[(0, 2)] - 0.5).abs() < 1e-12);
    assert!((r[(1, 3)] - 0.5).abs() < 1e-12);
    assert!((r[(0, 2)] - cross_correlation(0, 1, &hp).unwrap()).abs() < 1e-12);
}

#[test]
fn cross_correlation_matches_empirical_draws() {
    let hp = symmetric();
    let grid = TimeGrid::new(vec![0.0]).unwrap();
    let s = assemble_covariance(&hp, &grid, 2).unwrap();
    let chol = linalg::cholesky(&s, "s").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 100_000;
    let zero = DVector::zeros(2);
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for _ in 0..n {
        let d = linalg::sample_mvn(&zero, &chol, &mut rng);
        sxx += d[0] * d[0];
        syy += d[1] * d[1];
        sxy += d[0] * d[1];
    }
    let r = sxy / (sxx * syy).sqrt();
    // standard error of r is about (1 - r²)/√n = 0.0024
    assert!((r - 0.5).abs() < 0.01, "empirical {r}");
}

#[test]
fn eight_point_grid_is_positive_definite() {
    let hp = MogpHyperparams::new(
        vec![0.7, -0.4, 1.2],
        vec![0.3, 1.0, 0.5],
        vec![2.0, 5.0, 3.0],
        vec![6.0, 1.0, 4.0],
        0.01,
        vec![0.0; 3],
    )
    .unwrap();
    let grid = TimeGrid::new((0..8).map(|j| j as f64 / 7.0).collect()).unwrap();
    assert!(linalg::cholesky(&assemble_covariance(&hp, &grid, 3).unwrap(), "s").is_ok());
}

#[test]
fn identity_normalizes_to_identity() {
    let i = DMatrix::<f64>::identity(6, 6);
    assert_eq!(normalize_to_correlation(&i, 2, 3).unwrap(), i);
}

#[test]
fn quadrature_matches_closed_form_examples() {
    let hp = symmetric();
    let auto = auto_covariance(0, 1.0, &hp, false).unwrap();
    assert!((quadrature_oracle(0, 0, 1.0, &hp).unwrap() - auto).abs() < 1e-6);
    let cross = cross_covariance(0, 1, 0.0, &hp).unwrap();
    assert!((quadrature_oracle(0, 1, 0.0, &hp).unwrap() - cross).abs() < 1e-6);
    let off = MogpHyperparams::uniform(2, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0).unwrap();
    assert_eq!(quadrature_oracle(0, 1, 0.3, &off).unwrap(), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cross_covariance_is_symmetric_in_lag(hp in hp_strategy(3), dt in -3.0..3.0f64) {
        for a in 0..3 {
            for b in 0..3 {
                if a != b {
                    let x = cross_covariance(a, b, dt, &hp).unwrap();
                    let y = cross_covariance(b, a, -dt, &hp).unwrap();
                    prop_assert!((x - y).abs() <= 1e-15 * x.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn covariances_depend_only_on_lag(hp in hp_strategy(2), t in 0.0..1.0f64, dt in 0.0..1.0f64, shift in -5.0..5.0f64) {
        let g1 = TimeGrid::new(vec![t, t + dt + 1e-3]).unwrap();
        let g2 = TimeGrid::new(vec![t + shift, t + shift + dt + 1e-3]).unwrap();
        let s1 = assemble_covariance(&hp, &g1, 2).unwrap();
        let s2 = assemble_covariance(&hp, &g2, 2).unwrap();
        prop_assert!((s1 - s2).amax() < 1e-12);
    }

    #[test]
    fn assembled_matrices_are_symmetric_and_factorizable(
        (k, hp, q) in (1usize..=4).prop_flat_map(|k| (Just(k), hp_strategy(k), 1usize..=20))
    ) {
        let grid = TimeGrid::new((0..q).map(|j| j as f64 / q as f64).collect()).unwrap();
        let s = assemble_covariance(&hp, &grid, k).unwrap();
        prop_assert!((&s - s.transpose()).amax() <= 1e-12);
        prop_assert!(linalg::cholesky(&s, "s").is_ok());
        let r = normalize_to_correlation(&s, k, q).unwrap();
        prop_assert!(r.diagonal().iter().all(|d| (d - 1.0).abs() <= 1e-12));
    }

    #[test]
    fn closed_forms_match_quadrature(hp in hp_strategy(2), dt in -2.0..2.0f64) {
        let auto = auto_covariance(0, dt, &hp, false).unwrap();
        prop_assert!((quadrature_oracle(0, 0, dt, &hp).unwrap() - auto).abs() < 1e-6);
        let cross = cross_covariance(0, 1, dt, &hp).unwrap();
        prop_assert!((quadrature_oracle(0, 1, dt, &hp).unwrap() - cross).abs() < 1e-6);
    }

    #[test]
    fn normalization_is_idempotent_and_keeps_definiteness(hp in hp_strategy(3), grid in sorted_grid(5)) {
        let s = assemble_covariance(&hp, &grid, 3).unwrap();
        let r = normalize_to_correlation(&s, 3, 5).unwrap();
        let rr = normalize_to_correlation(&r, 3, 5).unwrap();
        prop_assert!((&r - &rr).amax() < 1e-14);
        prop_assert!(linalg::cholesky(&r, "r").is_ok());
        prop_assert!((&r - prior_correlation(&hp, grid.as_slice()).unwrap()).amax() < 1e-14);
    }

    #[test]
    fn cross_correlations_are_bounded(hp in hp_strategy(4)) {
        let r = correlation_matrix(&hp).unwrap();
        prop_assert!(r.iter().all(|v| v.abs() <= 1.0 + 1e-12));
    }
}
