use mogp_dfa::alignment::SignedPermutation;
use mogp_dfa::kernel::prior_correlation;
use mogp_dfa::model::{complete_data_loglik, penalized_objective, vec_factor_major};
use mogp_dfa::{Dataset, LatentState, MogpHyperparams, PriorConfig};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Beta, Continuous, InverseGamma, Normal};

fn tiny(seed: u64) -> (Dataset, LatentState, MogpHyperparams, PriorConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (p, k) = (3, 2);
    let subjects = vec![
        ("a".to_string(), vec![0.0, 0.4], DMatrix::from_fn(p, 2, |_, _| rng.random_range(-2.0..2.0))),
        ("b".to_string(), vec![0.4, 1.0], DMatrix::from_fn(p, 2, |_, _| rng.random_range(-2.0..2.0))),
    ];
    let ds = Dataset::new(vec!["x".into(), "y".into(), "z".into()], subjects).unwrap();
    let hp = MogpHyperparams::new(vec![0.8, -0.5], vec![0.6, 1.1], vec![2.0, 3.0], vec![4.0, 1.5], 0.05, vec![0.2, -0.3])
        .unwrap();
    let prior = PriorConfig { c0: 0.7, d0: 2.1, c1: 1.5, d1: 0.8, c2: 2.0, d2: 1.2, c3: 1.1, d3: 0.9, mu: vec![0.1, -0.2, 0.3] };
    let st = LatentState {
        m: DMatrix::from_fn(2, p, |_, _| rng.random_range(-1.0..1.0)),
        y_aug: (0..2).map(|_| DMatrix::from_fn(k, 3, |_, _| rng.random_range(-1.5..1.5))).collect(),
        a: DMatrix::from_fn(p, k, |_, _| rng.random_range(-2.0..2.0)),
        z: DMatrix::from_row_slice(p, k, &[1, 0, 1, 1, 0, 1]),
        rho2: vec![0.7, 1.9],
        pi: vec![0.3, 0.6],
        sigma2: vec![0.5, 1.4, 2.2],
        phi2: vec![0.3, 0.8, 1.6],
    };
    (ds, st, hp, prior)
}

/// MVN log density through the explicit inverse and determinant.
fn dense_mvn(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let r = x - mean;
    let inv = cov.clone().try_inverse().unwrap();
    let quad = (r.transpose() * inv * &r)[(0, 0)];
    -0.5 * (x.len() as f64 * (2.0 * std::f64::consts::PI).ln() + cov.determinant().ln() + quad)
}

#[test]
fn complete_data_loglik_matches_term_by_term_oracle() {
    let (ds, st, hp, prior) = tiny(3);
    let got = complete_data_loglik(&ds, &st, &hp, &prior).unwrap();
    let l = st.a.component_mul(&st.z.map(f64::from));

    let mut obs = 0.0;
    for (i, s) in ds.subjects.iter().enumerate() {
        for (j, &gj) in s.grid_index.iter().enumerate() {
            for g in 0..3 {
                let mean = st.m[(i, g)] + (0..2).map(|a| l[(g, a)] * st.y_aug[i][(a, gj)]).sum::<f64>();
                obs += Normal::new(mean, st.phi2[g].sqrt()).unwrap().ln_pdf(s.x[(g, j)]);
            }
        }
    }
    assert!((got.observation - obs).abs() < 1e-10);

    let cov = prior_correlation(&hp, ds.grid.as_slice()).unwrap();
    let c = DVector::from_fn(6, |r, _| hp.c[r / 3]);
    let scores: f64 = st.y_aug.iter().map(|y| dense_mvn(&vec_factor_major(y), &c, &cov)).sum();
    assert!((got.factor_scores - scores).abs() < 1e-9);

    let mut rest = 0.0;
    for i in 0..2 {
        for g in 0..3 {
            rest += Normal::new(prior.mu[g], st.sigma2[g].sqrt()).unwrap().ln_pdf(st.m[(i, g)]);
        }
    }
    for g in 0..3 {
        for a in 0..2 {
            rest += Normal::new(0.0, st.rho2[a].sqrt()).unwrap().ln_pdf(st.a[(g, a)]);
            rest += if st.z[(g, a)] == 1 { st.pi[a].ln() } else { (1.0 - st.pi[a]).ln() };
        }
        rest += InverseGamma::new(prior.c2, prior.d2).unwrap().ln_pdf(st.sigma2[g]);
        rest += InverseGamma::new(prior.c3, prior.d3).unwrap().ln_pdf(st.phi2[g]);
    }
    for a in 0..2 {
        rest += Beta::new(prior.c0, prior.d0).unwrap().ln_pdf(st.pi[a]);
        rest += InverseGamma::new(prior.c1, prior.d1).unwrap().ln_pdf(st.rho2[a]);
    }
    let got_rest = got.means + got.coefficients + got.inclusion + got.hyperpriors;
    assert!((got_rest - rest).abs() < 1e-9, "{got_rest} vs {rest}");
    assert!((got.total() - (obs + scores + rest)).abs() < 1e-8);
}

#[test]
fn unpenalized_objective_equals_score_term() {
    let (ds, st, hp, prior) = tiny(8);
    let full = complete_data_loglik(&ds, &st, &hp, &prior).unwrap();
    let obj = penalized_objective(&st.y_aug, &ds.grid, &hp, 0.0).unwrap();
    assert!((full.factor_scores - obj).abs() < 1e-12 * obj.abs().max(1.0));
}

#[test]
fn sign_flip_leaves_marginal_covariance_unchanged() {
    // k = 2, q = 2: Cov(vec X) = (L ⊗ I) Σ_Y (L ⊗ I)ᵀ + Σ_X in time-major blocks
    let hp = MogpHyperparams::new(vec![0.9, 0.6], vec![0.5, 0.8], vec![2.0, 3.0], vec![4.0, 2.5], 0.02, vec![0.0; 2]).unwrap();
    let times = [0.0, 0.6];
    let sy = prior_correlation(&hp, &times).unwrap();
    let l = DMatrix::from_row_slice(3, 2, &[1.5, 0.0, -0.7, 2.0, 0.0, 0.4]);
    let phi2 = [0.3, 0.5, 0.2];
    let marginal = |l: &DMatrix<f64>, sy: &DMatrix<f64>| {
        // rows g*2 + j, factor-major score index a*2 + j
        let big = DMatrix::from_fn(6, 4, |r, c| if r % 2 == c % 2 { l[(r / 2, c / 2)] } else { 0.0 });
        let mut m = &big * sy * big.transpose();
        for r in 0..6 {
            m[(r, r)] += phi2[r / 2];
        }
        m
    };
    let base = marginal(&l, &sy);
    for signs in [[1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]] {
        let d = DMatrix::from_diagonal(&DVector::from_row_slice(&signs));
        let dbig = DMatrix::from_fn(4, 4, |r, c| if r == c { signs[r / 2] } else { 0.0 });
        let flipped = marginal(&(&l * &d), &(&dbig * &sy * dbig.transpose()));
        assert!((flipped - &base).amax() < 1e-14);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn observation_term_is_invariant_under_signed_permutations(seed in any::<u64>(), perm_idx in 0usize..2, s0 in prop::bool::ANY, s1 in prop::bool::ANY) {
        let (ds, st, hp, prior) = tiny(seed);
        let perm = if perm_idx == 0 { vec![0, 1] } else { vec![1, 0] };
        let sp = SignedPermutation::new(perm, vec![if s0 { 1 } else { -1 }, if s1 { 1 } else { -1 }]).unwrap();
        let moved = sp.apply_state(&st).unwrap();
        let hp2 = sp.apply_hyperparams(&hp).unwrap();
        let a = complete_data_loglik(&ds, &st, &hp, &prior).unwrap();
        let b = complete_data_loglik(&ds, &moved, &hp2, &prior).unwrap();
        prop_assert!((a.observation - b.observation).abs() < 1e-10 * a.observation.abs().max(1.0));
        prop_assert!((a.factor_scores - b.factor_scores).abs() < 1e-9 * a.factor_scores.abs().max(1.0));
    }

    #[test]
    fn objective_decreases_with_penalty(seed in any::<u64>(), l1 in 0.0..10.0f64, dl in 0.01..10.0f64) {
        let (ds, st, hp, _) = tiny(seed);
        let a = penalized_objective(&st.y_aug, &ds.grid, &hp, l1).unwrap();
        let b = penalized_objective(&st.y_aug, &ds.grid, &hp, l1 + dl).unwrap();
        prop_assert!(b < a);
    }

    #[test]
    fn long_format_round_trips(seed in any::<u64>()) {
        let (ds, st, _, _) = tiny(seed);
        let mut buf = Vec::new();
        ds.write_long(&mut buf).unwrap();
        prop_assert_eq!(Dataset::read_long(buf.as_slice()).unwrap(), ds);
        prop_assert_eq!(LatentState::from_json(&st.to_json().unwrap()).unwrap(), st);
    }
}
