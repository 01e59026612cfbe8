use std::collections::HashMap;

use mogp_dfa::preprocess::{
    icc_distance_diagnostic, map_dataset, map_to_reference_grid, regress_out_age, standardize_times, unstandardize_times,
};
use mogp_dfa::Dataset;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn weekly(weeks: usize) -> Vec<f64> {
    (0..weeks).map(|w| 7.0 * w as f64).collect()
}

/// Visits roughly every one to three weeks with a few days of jitter.
fn visit_schedule<R: Rng>(rng: &mut R) -> Vec<f64> {
    let mut t = rng.random_range(0.0..3.0f64).round();
    let mut out = vec![t];
    for _ in 0..rng.random_range(2..6) {
        t += 7.0 * rng.random_range(1..=3) as f64 + rng.random_range(-2i32..=2) as f64;
        out.push(t);
    }
    out
}

#[test]
fn icc_is_high_for_weekly_designs() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let reference = weekly(20);
    let before: Vec<Vec<f64>> = (0..300).map(|_| visit_schedule(&mut rng)).collect();
    let after: Vec<Vec<f64>> =
        before.iter().map(|t| map_to_reference_grid(t, &reference).unwrap().mapped).collect();
    let icc = icc_distance_diagnostic(&before, &after).unwrap();
    assert!(icc >= 0.85, "{icc}");
}

#[test]
fn icc_vanishes_when_distances_are_shuffled() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let before: Vec<Vec<f64>> = (0..1000)
        .map(|_| {
            let mut t = 0.0;
            let mut out = vec![t];
            for _ in 0..4 {
                t += rng.random_range(1.0..30.0);
                out.push(t);
            }
            out
        })
        .collect();
    let mut gaps: Vec<f64> = before.iter().flat_map(|t| t.windows(2).map(|w| w[1] - w[0]).collect::<Vec<_>>()).collect();
    gaps.shuffle(&mut rng);
    let mut it = gaps.into_iter();
    let after: Vec<Vec<f64>> = before
        .iter()
        .map(|t| {
            let mut acc = t[0];
            let mut out = vec![acc];
            for _ in 1..t.len() {
                acc += it.next().unwrap();
                out.push(acc);
            }
            out
        })
        .collect();
    let icc = icc_distance_diagnostic(&before, &after).unwrap();
    assert!(icc.abs() < 0.1, "{icc}");
}

fn with_ages(n: usize, seed: u64) -> (Dataset, HashMap<String, f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ages = HashMap::new();
    let subjects = (0..n)
        .map(|i| {
            let id = format!("s{i}");
            ages.insert(id.clone(), rng.random_range(20.0..80.0));
            let q = rng.random_range(1..4);
            (id, (0..q).map(|j| j as f64).collect(), DMatrix::from_fn(3, q, |_, _| rng.random_range(-5.0..5.0)))
        })
        .collect();
    (Dataset::new(vec!["a".into(), "b".into(), "c".into()], subjects).unwrap(), ages)
}

#[test]
fn age_residuals_are_orthogonal_and_uncorrelated() {
    let (ds, ages) = with_ages(40, 2);
    let res = regress_out_age(&ds, &ages).unwrap();
    for g in 0..3 {
        let mut pairs = Vec::new();
        for s in &res.subjects {
            for j in 0..s.q() {
                pairs.push((ages[&s.id], s.x[(g, j)]));
            }
        }
        let dot: f64 = pairs.iter().map(|(a, r)| a * r).sum();
        let sum: f64 = pairs.iter().map(|(_, r)| r).sum();
        assert!(dot.abs() < 1e-8, "{dot}");
        // zero residual mean plus orthogonality gives zero correlation
        assert!(sum.abs() < 1e-10, "{sum}");
    }
}

#[test]
fn exact_age_trend_leaves_zero_residuals() {
    let (ds, ages) = with_ages(10, 3);
    let subjects = ds
        .subjects
        .iter()
        .map(|s| (s.id.clone(), s.times.as_slice().to_vec(), DMatrix::from_element(3, s.q(), 2.0 * ages[&s.id])))
        .collect();
    let ds = Dataset::new(ds.biomarkers.clone(), subjects).unwrap();
    let res = regress_out_age(&ds, &ages).unwrap();
    assert!(res.subjects.iter().all(|s| s.x.amax() < 1e-10));
}

#[test]
fn mapped_dataset_lies_on_reference_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let reference = weekly(30);
    let subjects = (0..50)
        .map(|i| {
            let t = visit_schedule(&mut rng);
            let q = t.len();
            (format!("s{i}"), t, DMatrix::from_fn(2, q, |g, j| (g * 10 + j) as f64))
        })
        .collect();
    let ds = Dataset::new(vec!["a".into(), "b".into()], subjects).unwrap();
    let (mapped, _, records) = map_dataset(&ds, &reference).unwrap();
    assert_eq!(records.len(), ds.total_observations());
    for s in &mapped.subjects {
        assert!(s.times.as_slice().iter().all(|t| reference.contains(t)));
        assert!(s.times.as_slice().windows(2).all(|w| w[0] < w[1]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn mapping_preserves_gap_order_without_collisions(gaps in prop::collection::vec(0.5..40.0f64, 1..8), start in 0.0..10.0f64) {
        let mut times = vec![start];
        for g in &gaps {
            times.push(times.last().unwrap() + g);
        }
        let m = map_to_reference_grid(&times, &weekly(60)).unwrap();
        prop_assume!(!m.has_merges());
        let mapped: Vec<f64> = m.mapped.windows(2).map(|w| w[1] - w[0]).collect();
        for a in 0..gaps.len() {
            for b in 0..gaps.len() {
                if gaps[a] < gaps[b] {
                    prop_assert!(mapped[a] <= mapped[b]);
                }
            }
        }
    }

    #[test]
    fn standardizing_and_unscaling_recovers_times(days in prop::collection::btree_set(0u32..400, 2..10)) {
        let times: Vec<f64> = days.iter().map(|&d| f64::from(d)).collect();
        let ds = Dataset::new(vec!["g".into()], vec![("s".into(), times.clone(), DMatrix::zeros(1, times.len()))]).unwrap();
        prop_assume!(*times.last().unwrap() > 0.0);
        let (std, scale) = standardize_times(&ds).unwrap();
        prop_assert!(std.grid.as_slice().iter().all(|t| (0.0..=1.0).contains(t)));
        let back = unstandardize_times(&std, scale).unwrap();
        prop_assert_eq!(back.subjects[0].times.as_slice(), times.as_slice());
    }

    #[test]
    fn unscaling_recovers_decimal_times(ms in prop::collection::btree_set(0u64..100_000_000, 2..8)) {
        // times recorded to the millisecond of a day
        let times: Vec<f64> = ms.iter().map(|&v| v as f64 / 1000.0).collect();
        prop_assume!(*times.last().unwrap() > 0.0);
        let ds = Dataset::new(vec!["g".into()], vec![("s".into(), times, DMatrix::zeros(1, ms.len()))]).unwrap();
        let (std, scale) = standardize_times(&ds).unwrap();
        prop_assert_eq!(unstandardize_times(&std, scale).unwrap(), ds);
    }

    #[test]
    fn unscaling_lands_on_a_preimage(t in 0.0..1e4f64, extra in 1e-3..1e4f64) {
        let hi = t + extra;
        let s = t / hi;
        let back = mogp_dfa::preprocess::unscale_time(s, hi);
        prop_assert_eq!(back / hi, s);
        prop_assert!((back - t).abs() <= 4.0 * f64::EPSILON * t.max(1.0));
    }
}
