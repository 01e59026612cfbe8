//! Signed permutations of the factors and alignment of loadings across draws,
//! chains and ground truth.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gibbs::ChainSamples;
use crate::kernel::MogpHyperparams;
use crate::model::LatentState;

/// Largest `k` for which all `2^k k!` signed permutations are enumerated.
pub const MAX_ALIGNMENT_FACTORS: usize = 8;

/// Factor `a` of the result is `signs[a]` times factor `perm[a]` of the input.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SignedPermutation {
    perm: Vec<usize>,
    signs: Vec<i8>,
}

impl SignedPermutation {
    pub fn new(perm: Vec<usize>, signs: Vec<i8>) -> Result<Self> {
        let k = perm.len();
        if signs.len() != k {
            return Err(Error::DimensionMismatch(format!("{k} permutation entries but {} signs", signs.len())));
        }
        let mut seen = vec![false; k];
        for &p in &perm {
            if p >= k || seen[p] {
                return Err(Error::InvalidArgument(format!("{perm:?} is not a permutation")));
            }
            seen[p] = true;
        }
        if signs.iter().any(|&s| s != 1 && s != -1) {
            return Err(Error::InvalidArgument("signs must be +1 or -1".into()));
        }
        Ok(Self { perm, signs })
    }

    pub fn identity(k: usize) -> Self {
        Self { perm: (0..k).collect(), signs: vec![1; k] }
    }

    pub fn k(&self) -> usize {
        self.perm.len()
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn signs(&self) -> &[i8] {
        &self.signs
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity(self.k())
    }

    pub fn inverse(&self) -> Self {
        let k = self.k();
        let mut perm = vec![0; k];
        let mut signs = vec![1; k];
        for a in 0..k {
            perm[self.perm[a]] = a;
            signs[self.perm[a]] = self.signs[a];
        }
        Self { perm, signs }
    }

    /// `self ∘ first`: apply `first`, then `self`.
    pub fn compose(&self, first: &Self) -> Result<Self> {
        self.check(first.k())?;
        let perm = self.perm.iter().map(|&b| first.perm[b]).collect();
        let signs = (0..self.k()).map(|a| self.signs[a] * first.signs[self.perm[a]]).collect();
        Ok(Self { perm, signs })
    }

    fn check(&self, k: usize) -> Result<()> {
        if k != self.k() {
            return Err(Error::DimensionMismatch(format!(
                "signed permutation on {} factors applied to {k}",
                self.k()
            )));
        }
        Ok(())
    }

    fn sign(&self, a: usize) -> f64 {
        f64::from(self.signs[a])
    }

    /// Permute and sign-flip the columns of a loading-like `p × k` matrix.
    pub fn apply_loadings(&self, l: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(l.ncols())?;
        Ok(DMatrix::from_fn(l.nrows(), l.ncols(), |g, a| self.sign(a) * l[(g, self.perm[a])]))
    }

    /// Permute and sign-flip the rows of a `k × q` score matrix.
    pub fn apply_scores(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(y.nrows())?;
        Ok(DMatrix::from_fn(y.nrows(), y.ncols(), |a, j| self.sign(a) * y[(self.perm[a], j)]))
    }

    /// Transform loadings and every score matrix together; `L Y` is unchanged.
    pub fn apply(&self, l: &DMatrix<f64>, ys: &[DMatrix<f64>]) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
        let l2 = self.apply_loadings(l)?;
        let ys2 = ys.iter().map(|y| self.apply_scores(y)).collect::<Result<_>>()?;
        Ok((l2, ys2))
    }

    /// `s_a s_b R[π(a), π(b)]`.
    pub fn apply_correlation(&self, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(r.ncols())?;
        Ok(DMatrix::from_fn(r.nrows(), r.ncols(), |a, b| {
            self.sign(a) * self.sign(b) * r[(self.perm[a], self.perm[b])]
        }))
    }

    fn permute<T: Copy>(&self, v: &[T]) -> Vec<T> {
        self.perm.iter().map(|&b| v[b]).collect()
    }

    /// Relabel a full latent state: coefficients, indicators, scores and the
    /// per-factor scalars. Subject means and residual terms are untouched.
    pub fn apply_state(&self, st: &LatentState) -> Result<LatentState> {
        self.check(st.k())?;
        let z = DMatrix::from_fn(st.z.nrows(), st.z.ncols(), |g, a| st.z[(g, self.perm[a])]);
        Ok(LatentState {
            m: st.m.clone(),
            y_aug: st.y_aug.iter().map(|y| self.apply_scores(y)).collect::<Result<_>>()?,
            a: self.apply_loadings(&st.a)?,
            z,
            rho2: self.permute(&st.rho2),
            pi: self.permute(&st.pi),
            sigma2: st.sigma2.clone(),
            phi2: st.phi2.clone(),
        })
    }

    /// Relabel GP hyperparameters; the shared amplitudes and means change sign
    /// with their factor.
    pub fn apply_hyperparams(&self, hp: &MogpHyperparams) -> Result<MogpHyperparams> {
        self.check(hp.k())?;
        let signed = |v: &[f64]| -> Vec<f64> { (0..self.k()).map(|a| self.sign(a) * v[self.perm[a]]).collect() };
        MogpHyperparams::new(
            signed(&hp.v0),
            self.permute(&hp.v1),
            self.permute(&hp.b0),
            self.permute(&hp.b1),
            hp.psi2,
            signed(&hp.c),
        )
    }
}

/// `L Y` with each entry's terms summed in sorted order, so the result does
/// not depend on the factor labelling.
pub fn loading_product(l: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if l.ncols() != y.nrows() {
        return Err(Error::DimensionMismatch(format!("{:?} times {:?}", l.shape(), y.shape())));
    }
    let k = l.ncols();
    let mut terms = vec![0.0; k];
    Ok(DMatrix::from_fn(l.nrows(), y.ncols(), |g, j| {
        for (a, t) in terms.iter_mut().enumerate() {
            *t = l[(g, a)] * y[(a, j)];
        }
        terms.sort_by(f64::total_cmp);
        terms.iter().sum()
    }))
}

/// Result of matching an estimate to a reference.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    /// Maps the estimate onto the reference.
    pub sp: SignedPermutation,
    pub aligned: DMatrix<f64>,
    pub mad: f64,
}

/// Advance to the next permutation in lexicographic order.
fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

fn check_enumerable(k: usize) -> Result<()> {
    if k == 0 || k > MAX_ALIGNMENT_FACTORS {
        return Err(Error::InvalidArgument(format!(
            "alignment enumerates signed permutations for 1 <= k <= {MAX_ALIGNMENT_FACTORS}, got k = {k}"
        )));
    }
    Ok(())
}

/// Signed permutation of the estimate's columns minimizing the mean absolute
/// difference to `reference`, over all `2^k k!` candidates. Ties go to the
/// lexicographically smallest permutation, then to `+1` signs.
pub fn align_to_reference(estimate: &DMatrix<f64>, reference: &DMatrix<f64>) -> Result<Alignment> {
    if estimate.shape() != reference.shape() {
        return Err(Error::DimensionMismatch(format!(
            "estimate {:?} vs reference {:?}",
            estimate.shape(),
            reference.shape()
        )));
    }
    let (p, k) = estimate.shape();
    check_enumerable(k)?;
    // cost[(b, a)][s]: column b of the estimate with sign s placed at position a
    let col_cost = |b: usize, a: usize, s: f64| -> f64 {
        (0..p).map(|g| (s * estimate[(g, b)] - reference[(g, a)]).abs()).sum()
    };
    let mut plus = DMatrix::zeros(k, k);
    let mut minus = DMatrix::zeros(k, k);
    for b in 0..k {
        for a in 0..k {
            plus[(b, a)] = col_cost(b, a, 1.0);
            minus[(b, a)] = col_cost(b, a, -1.0);
        }
    }
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best: Option<(f64, Vec<usize>, Vec<i8>)> = None;
    loop {
        let mut total = 0.0;
        let mut signs = vec![1i8; k];
        for a in 0..k {
            let b = perm[a];
            if minus[(b, a)] < plus[(b, a)] {
                signs[a] = -1;
                total += minus[(b, a)];
            } else {
                total += plus[(b, a)];
            }
        }
        if best.as_ref().is_none_or(|(c, _, _)| total < *c) {
            best = Some((total, perm.clone(), signs));
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    let (total, perm, signs) = best.expect("at least the identity");
    let sp = SignedPermutation::new(perm, signs)?;
    let aligned = sp.apply_loadings(estimate)?;
    let denom = (p * k).max(1) as f64;
    Ok(Alignment { sp, aligned, mad: total / denom })
}

/// Signed permutation minimizing the mean absolute difference between the
/// off-diagonal entries of two correlation matrices.
pub fn align_correlation(estimate: &DMatrix<f64>, reference: &DMatrix<f64>) -> Result<Alignment> {
    if estimate.shape() != reference.shape() || !estimate.is_square() {
        return Err(Error::DimensionMismatch("correlation matrices must be square and equal-sized".into()));
    }
    let k = estimate.nrows();
    check_enumerable(k)?;
    let pairs = (k * (k.saturating_sub(1)) / 2).max(1) as f64;
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best: Option<(f64, SignedPermutation)> = None;
    loop {
        // signs enumerated as bit masks, +1 where the bit is clear
        for mask in 0..(1usize << k) {
            if mask & 1 == 1 {
                // flipping every sign leaves a correlation matrix unchanged
                continue;
            }
            let signs: Vec<i8> = (0..k).map(|a| if (mask >> a) & 1 == 1 { -1 } else { 1 }).collect();
            let sp = SignedPermutation { perm: perm.clone(), signs };
            let cand = sp.apply_correlation(estimate)?;
            let mut total = 0.0;
            for a in 1..k {
                for b in 0..a {
                    total += (cand[(a, b)] - reference[(a, b)]).abs();
                }
            }
            if best.as_ref().is_none_or(|(c, _)| total < *c) {
                best = Some((total, sp));
            }
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    let (total, sp) = best.expect("at least the identity");
    let aligned = sp.apply_correlation(estimate)?;
    Ok(Alignment { sp, aligned, mad: total / pairs })
}

/// Align every draw's loadings to those of draw `pivot`.
pub fn align_chain_draws(samples: &ChainSamples, pivot: usize) -> Result<(ChainSamples, Vec<SignedPermutation>)> {
    let reference = samples
        .draws
        .get(pivot)
        .ok_or_else(|| Error::InvalidArgument(format!("pivot {pivot} out of range for {} draws", samples.len())))?
        .loadings();
    align_draws_to(samples, &reference)
}

/// Align every draw's loadings to `reference`.
pub fn align_draws_to(
    samples: &ChainSamples,
    reference: &DMatrix<f64>,
) -> Result<(ChainSamples, Vec<SignedPermutation>)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no draws to align".into()));
    }
    let mut out = samples.clone();
    let mut sps = Vec::with_capacity(samples.len());
    for (dst, st) in out.draws.iter_mut().zip(&samples.draws) {
        let al = align_to_reference(&st.loadings(), reference)?;
        *dst = al.sp.apply_state(st)?;
        sps.push(al.sp);
    }
    Ok((out, sps))
}

/// Align several chains to a shared pivot: the highest-density draw of the
/// first chain.
pub fn align_chains(chains: &[ChainSamples]) -> Result<Vec<ChainSamples>> {
    let first = chains.first().ok_or_else(|| Error::InvalidArgument("no chains".into()))?;
    let pivot = first.best_draw().ok_or_else(|| Error::InvalidArgument("first chain is empty".into()))?;
    let reference = first.draws[pivot].loadings();
    chains.iter().map(|c| align_draws_to(c, &reference).map(|(s, _)| s)).collect()
}
