use mogp_dfa::alignment::{align_chain_draws, align_to_reference, loading_product, SignedPermutation};
use mogp_dfa::gibbs::{ChainConfig, ChainSamples};
use mogp_dfa::LatentState;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_sp<R: Rng>(k: usize, rng: &mut R) -> SignedPermutation {
    let mut perm: Vec<usize> = (0..k).collect();
    perm.shuffle(rng);
    let signs = (0..k).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
    SignedPermutation::new(perm, signs).unwrap()
}

fn gaussian<R: Rng>(r: usize, c: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

fn sp_strategy(k: usize) -> impl Strategy<Value = SignedPermutation> {
    (Just((0..k).collect::<Vec<usize>>()).prop_shuffle(), prop::collection::vec(prop::bool::ANY, k))
        .prop_map(|(perm, s)| SignedPermutation::new(perm, s.into_iter().map(|b| if b { 1 } else { -1 }).collect()).unwrap())
}

#[test]
fn identity_and_single_sign_flip() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let l = gaussian(4, 3, &mut rng);
    let ys = vec![gaussian(3, 5, &mut rng), gaussian(3, 5, &mut rng)];
    let (l2, ys2) = SignedPermutation::identity(3).apply(&l, &ys).unwrap();
    assert_eq!(l2, l);
    assert_eq!(ys2, ys);

    let l = gaussian(4, 1, &mut rng);
    let y = gaussian(1, 5, &mut rng);
    let flip = SignedPermutation::new(vec![0], vec![-1]).unwrap();
    let (l2, ys2) = flip.apply(&l, std::slice::from_ref(&y)).unwrap();
    assert_eq!(l2, -&l);
    assert_eq!(ys2[0], -&y);
    assert_eq!(&l2 * &ys2[0], &l * &y);
}

#[test]
fn dimension_mismatch_is_rejected() {
    let sp = SignedPermutation::identity(2);
    assert!(sp.apply_loadings(&DMatrix::zeros(3, 3)).is_err());
    assert!(sp.apply_scores(&DMatrix::zeros(3, 4)).is_err());
}

#[test]
fn planted_transforms_are_recovered_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let est = gaussian(6, 3, &mut rng);
        let sp0 = random_sp(3, &mut rng);
        let reference = sp0.apply_loadings(&est).unwrap();
        let al = align_to_reference(&est, &reference).unwrap();
        // the returned transform maps the estimate onto the reference
        assert_eq!(al.sp, sp0);
        assert_eq!(al.mad, 0.0);
        assert_eq!(al.aligned, reference);
    }
    let est = gaussian(6, 3, &mut rng);
    let same = align_to_reference(&est, &est).unwrap();
    assert!(same.sp.is_identity() && same.mad == 0.0);
}

#[test]
fn noisy_planted_transforms_are_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut hits = 0;
    for _ in 0..100 {
        let reference = gaussian(10, 2, &mut rng);
        let noisy = reference.map(|v| v + 0.01 * rng.sample::<f64, _>(StandardNormal));
        let sp0 = random_sp(2, &mut rng);
        let est = sp0.apply_loadings(&noisy).unwrap();
        if align_to_reference(&est, &reference).unwrap().sp == sp0.inverse() {
            hits += 1;
        }
    }
    assert!(hits >= 99, "{hits}/100");
}

#[test]
fn enumeration_bound_is_enforced() {
    let m = DMatrix::zeros(3, 9);
    assert!(align_to_reference(&m, &m).is_err());
}

fn chain_of(loadings: Vec<DMatrix<f64>>, q: usize, log_joint: Vec<f64>, seed: u64) -> ChainSamples {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = loadings
        .into_iter()
        .map(|a| {
            let (p, k) = a.shape();
            LatentState {
                m: DMatrix::zeros(1, p),
                y_aug: vec![gaussian(k, q, &mut rng)],
                z: DMatrix::from_element(p, k, 1),
                a,
                rho2: (1..=k).map(|v| v as f64).collect(),
                pi: (1..=k).map(|v| v as f64 / (k + 1) as f64).collect(),
                sigma2: vec![1.0; p],
                phi2: vec![1.0; p],
            }
        })
        .collect();
    let config = ChainConfig { iterations: log_joint.len(), burnin_fraction: 0.0, thin: 1, seed };
    ChainSamples { config, draws, log_joint }
}

#[test]
fn single_draw_is_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let chain = chain_of(vec![gaussian(5, 2, &mut rng)], 3, vec![0.0], 3);
    let (aligned, sps) = align_chain_draws(&chain, 0).unwrap();
    assert_eq!(aligned, chain);
    assert!(sps[0].is_identity());
}

#[test]
fn scrambled_draws_return_to_pivot_orientation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let base = gaussian(7, 3, &mut rng);
    let scrambles: Vec<SignedPermutation> = (0..30).map(|d| if d == 0 { SignedPermutation::identity(3) } else { random_sp(3, &mut rng) }).collect();
    let chain = chain_of(scrambles.iter().map(|sp| sp.apply_loadings(&base).unwrap()).collect(), 4, vec![0.0; 30], 4);
    let (aligned, _) = align_chain_draws(&chain, 0).unwrap();
    for (before, after) in chain.draws.iter().zip(&aligned.draws) {
        assert_eq!(after.a, base);
        assert_eq!(
            loading_product(&after.loadings(), &after.y_aug[0]).unwrap(),
            loading_product(&before.loadings(), &before.y_aug[0]).unwrap()
        );
    }
}

#[test]
fn label_switching_chain_recovers_planted_loadings() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (p, k, draws) = (10, 3, 400);
    let planted = DMatrix::from_fn(p, k, |g, a| if g % k == a { 3.0 + g as f64 * 0.2 } else { 0.3 * (a as f64 - 1.0) });
    let mut loadings = Vec::new();
    let mut log_joint = Vec::new();
    for d in 0..draws {
        let noisy = planted.map(|v| v + 0.2 * rng.sample::<f64, _>(StandardNormal));
        let sp = if d == 0 { SignedPermutation::identity(k) } else { random_sp(k, &mut rng) };
        loadings.push(sp.apply_loadings(&noisy).unwrap());
        log_joint.push(if d == 0 { 1.0 } else { 0.0 });
    }
    let chain = chain_of(loadings, 2, log_joint, 5);
    let pivot = chain.best_draw().unwrap();
    assert_eq!(pivot, 0);
    let mean = |c: &ChainSamples| c.draws.iter().fold(DMatrix::zeros(p, k), |acc, st| acc + &st.a) / c.len() as f64;
    let before = mean(&chain);
    let (aligned, _) = align_chain_draws(&chain, pivot).unwrap();
    let after = mean(&aligned);
    assert!((&after - &planted).amax() < 0.05, "{}", (&after - &planted).amax());
    // switching smears the unaligned mean far from the planted structure
    assert!((&before - &planted).amax() > 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn products_are_invariant_and_inverse_round_trips(
        (k, sp) in (1usize..=5).prop_flat_map(|k| (Just(k), sp_strategy(k))),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = gaussian(6, k, &mut rng);
        let ys = vec![gaussian(k, 4, &mut rng), gaussian(k, 3, &mut rng)];
        let (l2, ys2) = sp.apply(&l, &ys).unwrap();
        for (y, y2) in ys.iter().zip(&ys2) {
            prop_assert_eq!(loading_product(&l, y).unwrap(), loading_product(&l2, y2).unwrap());
        }
        let inv = sp.inverse();
        let (l3, ys3) = inv.apply(&l2, &ys2).unwrap();
        prop_assert_eq!(&l3, &l);
        prop_assert_eq!(&ys3, &ys);
        prop_assert!(inv.compose(&sp).unwrap().is_identity());
        prop_assert!(sp.compose(&inv).unwrap().is_identity());
    }

    #[test]
    fn alignment_never_worsens_mad_and_is_idempotent(k in 1usize..=4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let est = gaussian(5, k, &mut rng);
        let reference = gaussian(5, k, &mut rng);
        let al = align_to_reference(&est, &reference).unwrap();
        let raw = (&est - &reference).abs().sum() / (5 * k) as f64;
        prop_assert!(al.mad <= raw + 1e-12);
        let again = align_to_reference(&al.aligned, &reference).unwrap();
        prop_assert!(again.sp.is_identity());
        prop_assert_eq!(again.aligned, al.aligned);
    }
}
