//! Gibbs sampler for `Ω_aug = {M, Y_aug, A, Z, ρ², π, σ², φ²}` under fixed
//! GP hyperparameters, plus the posterior predictive at new times.
//!
//! One sweep updates, in order: the factor scores of every subject (block
//! draw at the observed times, then the remaining grid times from the GP
//! conditional), the inclusion rows of `Z` (enumerating all `2^k` rows), the
//! coefficient rows of `A`, the subject-biomarker means, and finally the
//! conjugate scalars `π, ρ², σ², φ²`.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Gamma, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{self, MogpHyperparams, TimeGrid};
use crate::linalg;
use crate::model::{self, vec_factor_major, Dataset, LatentState, PriorConfig};

/// Largest `k` for which inclusion rows are enumerated.
pub const MAX_ENUMERATED_FACTORS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    /// Number of full sweeps `S`.
    pub iterations: usize,
    /// Fraction of sweeps discarded as burn-in.
    pub burnin_fraction: f64,
    /// Keep every `thin`-th post-burn-in sweep.
    pub thin: usize,
    pub seed: u64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self { iterations: 100_000, burnin_fraction: 0.2, thin: 200, seed: 1 }
    }
}

impl ChainConfig {
    pub fn burnin(&self) -> usize {
        (self.iterations as f64 * self.burnin_fraction).floor() as usize
    }

    pub fn stored_draws(&self) -> usize {
        (self.iterations - self.burnin()) / self.thin
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.thin == 0 || !(0.0..1.0).contains(&self.burnin_fraction) {
            return Err(Error::InvalidArgument(format!("invalid chain configuration {self:?}")));
        }
        Ok(())
    }

    /// Whether sweep `s` (1-based) is stored.
    fn keeps(&self, s: usize) -> bool {
        let b = self.burnin();
        s > b && (s - b) % self.thin == 0
    }
}

/// Thinned post-burn-in draws of one chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSamples {
    pub config: ChainConfig,
    pub draws: Vec<LatentState>,
    /// Complete-data log density of every stored draw.
    pub log_joint: Vec<f64>,
}

impl ChainSamples {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    /// Index of the draw with the highest complete-data log density.
    pub fn best_draw(&self) -> Option<usize> {
        self.log_joint
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
    }
}

/// Posterior parameters of the conjugate scalar updates: `Beta(α, β)` for π,
/// `Inverse-Gamma(shape, rate)` for the variances.
#[derive(Debug, Clone, PartialEq)]
pub struct ConjugatePosteriors {
    pub pi: Vec<(f64, f64)>,
    pub rho2: Vec<(f64, f64)>,
    pub sigma2: Vec<(f64, f64)>,
    pub phi2: Vec<(f64, f64)>,
}

/// GP prior of one subject's augmented scores, split into observed and added times.
#[derive(Debug)]
struct ScorePrior {
    obs_idx: Vec<usize>,
    add_idx: Vec<usize>,
    /// `Σ_oo⁻¹`.
    prec_obs: DMatrix<f64>,
    /// `Σ_oo⁻¹ C_o`.
    prec_mean_obs: DVector<f64>,
    /// `Σ_ao Σ_oo⁻¹`.
    regression: DMatrix<f64>,
    /// Cholesky of `Σ_aa − Σ_ao Σ_oo⁻¹ Σ_oa`.
    cond_chol: Option<Cholesky<f64, Dyn>>,
}

/// Sums over subjects shared by the `Z` and `A` row updates.
struct RowStats {
    /// `Σ_i Y_i Y_iᵀ` (k × k).
    gram: DMatrix<f64>,
    /// Row g: `Σ_i Y_i (x_ig − μ_ig 1)` (p × k).
    cross: DMatrix<f64>,
    /// `Σ_i ‖x_ig − μ_ig 1‖²`.
    rss: Vec<f64>,
}

pub struct GibbsSampler<'a> {
    ds: &'a Dataset,
    hp: MogpHyperparams,
    prior: &'a PriorConfig,
    sigma_aug: DMatrix<f64>,
    mean_aug: DVector<f64>,
    score_priors: Vec<Arc<ScorePrior>>,
}

fn sample_inverse_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    let g = Gamma::new(shape, 1.0 / rate)
        .map_err(|e| Error::Numerical(format!("Inverse-Gamma({shape}, {rate}): {e}")))?
        .sample(rng);
    Ok(1.0 / g)
}

/// Draw an index with probabilities proportional to `exp(logw)`.
pub(crate) fn sample_log_weights<R: Rng + ?Sized>(logw: &[f64], rng: &mut R) -> Result<usize> {
    let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Numerical("all candidate log weights are -inf or NaN".into()));
    }
    let w: Vec<f64> = logw.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, wi) in w.iter().enumerate() {
        if u < *wi {
            return Ok(i);
        }
        u -= wi;
    }
    Ok(w.iter().rposition(|&x| x > 0.0).expect("max weight is 1"))
}

impl<'a> GibbsSampler<'a> {
    pub fn new(ds: &'a Dataset, hp: &MogpHyperparams, prior: &'a PriorConfig) -> Result<Self> {
        hp.validate()?;
        prior.validate(ds.p())?;
        let k = hp.k();
        if k > MAX_ENUMERATED_FACTORS {
            return Err(Error::InvalidArgument(format!(
                "k = {k} exceeds the enumeration bound {MAX_ENUMERATED_FACTORS}"
            )));
        }
        let q = ds.q();
        let sigma_aug = kernel::prior_correlation(hp, ds.grid.as_slice())?;
        linalg::cholesky(&sigma_aug, "factor-score prior covariance")?;
        let mean_aug = model::mean_vector(hp, q);

        let mut cache: HashMap<Vec<usize>, Arc<ScorePrior>> = HashMap::new();
        let mut score_priors = Vec::with_capacity(ds.n());
        for s in &ds.subjects {
            let entry = match cache.get(&s.grid_index) {
                Some(p) => Arc::clone(p),
                None => {
                    let p = Arc::new(Self::score_prior(&sigma_aug, &mean_aug, &s.grid_index, k, q)?);
                    cache.insert(s.grid_index.clone(), Arc::clone(&p));
                    p
                }
            };
            score_priors.push(entry);
        }
        Ok(Self { ds, hp: hp.clone(), prior, sigma_aug, mean_aug, score_priors })
    }

    fn score_prior(
        sigma: &DMatrix<f64>,
        mean: &DVector<f64>,
        grid_index: &[usize],
        k: usize,
        q: usize,
    ) -> Result<ScorePrior> {
        let observed: std::collections::HashSet<usize> = grid_index.iter().copied().collect();
        let obs_idx: Vec<usize> = (0..k).flat_map(|a| grid_index.iter().map(move |&j| a * q + j)).collect();
        let add_idx: Vec<usize> = (0..k)
            .flat_map(|a| (0..q).filter(|j| !observed.contains(j)).map(move |j| a * q + j))
            .collect();
        let s_oo = sigma.select_rows(&obs_idx).select_columns(&obs_idx);
        let chol = linalg::cholesky(&s_oo, "observed-time prior covariance")?;
        let mut prec_obs = chol.inverse();
        linalg::symmetrize(&mut prec_obs);
        let c_o = DVector::from_iterator(obs_idx.len(), obs_idx.iter().map(|&r| mean[r]));
        let prec_mean_obs = &prec_obs * c_o;
        let (regression, cond_chol) = if add_idx.is_empty() {
            (DMatrix::zeros(0, obs_idx.len()), None)
        } else {
            let s_ao = sigma.select_rows(&add_idx).select_columns(&obs_idx);
            let s_aa = sigma.select_rows(&add_idx).select_columns(&add_idx);
            let reg = chol.solve(&s_ao.transpose()).transpose();
            let mut cond = s_aa - &reg * s_ao.transpose();
            linalg::symmetrize(&mut cond);
            let cc = linalg::cholesky_jittered_scaled(&cond, 1.0, "conditional covariance of added times")?;
            (reg, Some(cc))
        };
        Ok(ScorePrior { obs_idx, add_idx, prec_obs, prec_mean_obs, regression, cond_chol })
    }

    pub fn dataset(&self) -> &Dataset {
        self.ds
    }

    pub fn hyperparams(&self) -> &MogpHyperparams {
        &self.hp
    }

    /// Normalized prior covariance of `vec(Y_augᵀ)` on the global grid.
    pub fn prior_covariance(&self) -> &DMatrix<f64> {
        &self.sigma_aug
    }

    /// Diffuse start: `Z ~ Bernoulli(E[π])`, `A, Y ~ N(0, 1)`, `μ_ig = μ_g`,
    /// unit variances.
    pub fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> LatentState {
        initial_state(self.ds, self.hp.k(), self.prior, rng)
    }

    /// Mean and covariance of `vec(Y_iᵀ)` at the observed times given everything else.
    pub fn factor_scores_posterior(&self, i: usize, st: &LatentState) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (prec, b) = self.factor_scores_canonical(i, st)?;
        let chol = linalg::cholesky_jittered(&prec, "factor-score posterior precision")?;
        Ok((chol.solve(&b), chol.inverse()))
    }

    fn factor_scores_canonical(&self, i: usize, st: &LatentState) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let s = &self.ds.subjects[i];
        let sp = &self.score_priors[i];
        let (p, k, qi) = (self.ds.p(), self.hp.k(), s.q());
        let l = st.loadings();
        // Lᵀ Φ⁻¹ L, scaling rows of L by 1/φ² instead of forming the pq_i × pq_i matrix
        let mut l_scaled = l.clone();
        for g in 0..p {
            l_scaled.row_mut(g).scale_mut(1.0 / st.phi2[g]);
        }
        let gmat = l.transpose() * &l_scaled;
        // residual x − μ, then h = (Lᵀ Φ⁻¹ (X − M))  (k × q_i)
        let mut resid = s.x.clone();
        for g in 0..p {
            let mu = st.m[(i, g)];
            resid.row_mut(g).add_scalar_mut(-mu);
        }
        let h = l_scaled.transpose() * resid;

        let mut prec = sp.prec_obs.clone();
        for a in 0..k {
            for b in 0..k {
                let gab = gmat[(a, b)];
                if gab != 0.0 {
                    for j in 0..qi {
                        prec[(a * qi + j, b * qi + j)] += gab;
                    }
                }
            }
        }
        let b = DVector::from_fn(k * qi, |r, _| h[(r / qi, r % qi)]) + &sp.prec_mean_obs;
        Ok((prec, b))
    }

    /// New `Y_i,aug` (k × q): block draw at observed times, then the added
    /// times from the GP conditional.
    pub fn sample_factor_scores<R: Rng + ?Sized>(
        &self,
        i: usize,
        st: &LatentState,
        rng: &mut R,
    ) -> Result<DMatrix<f64>> {
        let (prec, b) = self.factor_scores_canonical(i, st)?;
        let chol = linalg::cholesky_jittered(&prec, "factor-score posterior precision")?;
        let y_obs = linalg::sample_mvn_canonical(&chol, &b, rng);
        let sp = &self.score_priors[i];
        let (k, q) = (self.hp.k(), self.ds.q());
        let mut full = DVector::zeros(k * q);
        for (v, &r) in y_obs.iter().zip(&sp.obs_idx) {
            full[r] = *v;
        }
        if let Some(cc) = &sp.cond_chol {
            let c_o = DVector::from_iterator(sp.obs_idx.len(), sp.obs_idx.iter().map(|&r| self.mean_aug[r]));
            let c_a = DVector::from_iterator(sp.add_idx.len(), sp.add_idx.iter().map(|&r| self.mean_aug[r]));
            let mean = c_a + &sp.regression * (y_obs - c_o);
            let y_add = linalg::sample_mvn(&mean, cc, rng);
            for (v, &r) in y_add.iter().zip(&sp.add_idx) {
                full[r] = *v;
            }
        }
        Ok(model::unvec_factor_major(&full, k, q))
    }

    fn row_stats(&self, st: &LatentState) -> RowStats {
        let (p, k) = (self.ds.p(), self.hp.k());
        let mut gram = DMatrix::zeros(k, k);
        let mut cross = DMatrix::zeros(p, k);
        let mut rss = vec![0.0; p];
        for (i, s) in self.ds.subjects.iter().enumerate() {
            let y = st.observed_scores(self.ds, i);
            gram += &y * y.transpose();
            let mut resid = s.x.clone();
            for g in 0..p {
                resid.row_mut(g).add_scalar_mut(-st.m[(i, g)]);
                rss[g] += resid.row(g).norm_squared();
            }
            cross += resid * y.transpose();
        }
        RowStats { gram, cross, rss }
    }

    fn inclusion_log_weights(&self, g: usize, st: &LatentState, stats: &RowStats) -> Vec<f64> {
        let k = self.hp.k();
        let phi2 = st.phi2[g];
        (0..1usize << k)
            .map(|cand| {
                let l: Vec<f64> = (0..k)
                    .map(|a| if (cand >> a) & 1 == 1 { st.a[(g, a)] } else { 0.0 })
                    .collect();
                let mut quad = 0.0;
                let mut lin = 0.0;
                for a in 0..k {
                    lin += l[a] * stats.cross[(g, a)];
                    for b in 0..k {
                        quad += l[a] * stats.gram[(a, b)] * l[b];
                    }
                }
                let ll = -(stats.rss[g] - 2.0 * lin + quad) / (2.0 * phi2);
                let lp: f64 = (0..k)
                    .map(|a| if (cand >> a) & 1 == 1 { st.pi[a].ln() } else { (1.0 - st.pi[a]).ln() })
                    .sum();
                ll + lp
            })
            .collect()
    }

    /// Normalized probabilities of all `2^k` candidate rows of `Z` for biomarker
    /// `g`; bit `a` of the candidate index is `Z_ga`.
    pub fn inclusion_row_probabilities(&self, g: usize, st: &LatentState) -> Vec<f64> {
        let stats = self.row_stats(st);
        let lw = self.inclusion_log_weights(g, st, &stats);
        let max = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + lw.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        lw.iter().map(|l| (l - lse).exp()).collect()
    }

    pub fn sample_inclusion_row<R: Rng + ?Sized>(&self, g: usize, st: &LatentState, rng: &mut R) -> Result<Vec<u8>> {
        let stats = self.row_stats(st);
        self.sample_inclusion_row_with(g, st, &stats, rng)
    }

    fn sample_inclusion_row_with<R: Rng + ?Sized>(
        &self,
        g: usize,
        st: &LatentState,
        stats: &RowStats,
        rng: &mut R,
    ) -> Result<Vec<u8>> {
        let lw = self.inclusion_log_weights(g, st, stats);
        let cand = sample_log_weights(&lw, rng)?;
        Ok((0..self.hp.k()).map(|a| ((cand >> a) & 1) as u8).collect())
    }

    fn coefficient_row_canonical(&self, g: usize, st: &LatentState, stats: &RowStats) -> (DMatrix<f64>, DVector<f64>) {
        let k = self.hp.k();
        let phi2 = st.phi2[g];
        let zf = |a: usize| st.z[(g, a)] as f64;
        let prec = DMatrix::from_fn(k, k, |a, b| {
            let mut v = zf(a) * stats.gram[(a, b)] * zf(b) / phi2;
            if a == b {
                v += 1.0 / st.rho2[a];
            }
            v
        });
        let b = DVector::from_fn(k, |a, _| zf(a) * stats.cross[(g, a)] / phi2);
        (prec, b)
    }

    /// Mean and covariance of row `A_g·` given everything else.
    pub fn coefficient_row_posterior(&self, g: usize, st: &LatentState) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let stats = self.row_stats(st);
        let (prec, b) = self.coefficient_row_canonical(g, st, &stats);
        let chol = linalg::cholesky(&prec, "coefficient posterior precision")?;
        Ok((chol.solve(&b), chol.inverse()))
    }

    pub fn sample_coefficient_row<R: Rng + ?Sized>(
        &self,
        g: usize,
        st: &LatentState,
        rng: &mut R,
    ) -> Result<DVector<f64>> {
        let stats = self.row_stats(st);
        self.sample_coefficient_row_with(g, st, &stats, rng)
    }

    fn sample_coefficient_row_with<R: Rng + ?Sized>(
        &self,
        g: usize,
        st: &LatentState,
        stats: &RowStats,
        rng: &mut R,
    ) -> Result<DVector<f64>> {
        let (prec, b) = self.coefficient_row_canonical(g, st, stats);
        let chol = linalg::cholesky(&prec, "coefficient posterior precision")?;
        Ok(linalg::sample_mvn_canonical(&chol, &b, rng))
    }

    /// Mean and variance of `μ_ig` given everything else.
    pub fn subject_mean_posterior(&self, i: usize, g: usize, st: &LatentState) -> (f64, f64) {
        let s = &self.ds.subjects[i];
        let y = st.observed_scores(self.ds, i);
        let l = st.loadings();
        let fit = l.row(g) * &y;
        let resid_sum: f64 = (0..s.q()).map(|j| s.x[(g, j)] - fit[j]).sum();
        let var = 1.0 / (1.0 / st.sigma2[g] + s.q() as f64 / st.phi2[g]);
        let mean = var * (self.prior.mu[g] / st.sigma2[g] + resid_sum / st.phi2[g]);
        (mean, var)
    }

    /// New `M` (n × p).
    pub fn sample_subject_means<R: Rng + ?Sized>(&self, st: &LatentState, rng: &mut R) -> Result<DMatrix<f64>> {
        let (n, p) = (self.ds.n(), self.ds.p());
        let l = st.loadings();
        let mut m = DMatrix::zeros(n, p);
        for (i, s) in self.ds.subjects.iter().enumerate() {
            let y = st.observed_scores(self.ds, i);
            let fit = &l * y;
            for g in 0..p {
                let resid_sum: f64 = (0..s.q()).map(|j| s.x[(g, j)] - fit[(g, j)]).sum();
                let var = 1.0 / (1.0 / st.sigma2[g] + s.q() as f64 / st.phi2[g]);
                let mean = var * (self.prior.mu[g] / st.sigma2[g] + resid_sum / st.phi2[g]);
                m[(i, g)] = mean + var.sqrt() * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(m)
    }

    pub fn conjugate_posteriors(&self, st: &LatentState) -> ConjugatePosteriors {
        let (n, p, k) = (self.ds.n(), self.ds.p(), self.hp.k());
        let pr = self.prior;
        let pi = (0..k)
            .map(|a| {
                let on: f64 = (0..p).map(|g| st.z[(g, a)] as f64).sum();
                (pr.c0 + on, pr.d0 + (p as f64 - on))
            })
            .collect();
        let rho2 = (0..k)
            .map(|a| {
                let ss: f64 = (0..p).map(|g| st.a[(g, a)].powi(2)).sum();
                (pr.c1 + p as f64 / 2.0, pr.d1 + 0.5 * ss)
            })
            .collect();
        let sigma2 = (0..p)
            .map(|g| {
                let ss: f64 = (0..n).map(|i| (st.m[(i, g)] - pr.mu[g]).powi(2)).sum();
                (pr.c2 + n as f64 / 2.0, pr.d2 + 0.5 * ss)
            })
            .collect();
        let l = st.loadings();
        let mut rss = vec![0.0; p];
        for (i, s) in self.ds.subjects.iter().enumerate() {
            let fit = &l * st.observed_scores(self.ds, i);
            for g in 0..p {
                for j in 0..s.q() {
                    rss[g] += (s.x[(g, j)] - st.m[(i, g)] - fit[(g, j)]).powi(2);
                }
            }
        }
        let total_q = self.ds.total_observations() as f64;
        let phi2 = rss.iter().map(|r| (pr.c3 + 0.5 * total_q, pr.d3 + 0.5 * r)).collect();
        ConjugatePosteriors { pi, rho2, sigma2, phi2 }
    }

    /// New `(π, ρ², σ², φ²)`.
    #[allow(clippy::type_complexity)]
    pub fn sample_conjugate_scalars<R: Rng + ?Sized>(
        &self,
        st: &LatentState,
        rng: &mut R,
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
        let post = self.conjugate_posteriors(st);
        let pi = post
            .pi
            .iter()
            .map(|&(a, b)| {
                let x: f64 = Beta::new(a, b)
                    .map_err(|e| Error::Numerical(format!("Beta({a}, {b}): {e}")))?
                    .sample(rng);
                // keep π inside (0, 1) when the Beta draw rounds to a boundary
                Ok(x.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON))
            })
            .collect::<Result<Vec<_>>>()?;
        let ig = |v: &[(f64, f64)], rng: &mut R| -> Result<Vec<f64>> {
            v.iter().map(|&(s, r)| sample_inverse_gamma(s, r, rng)).collect()
        };
        let rho2 = ig(&post.rho2, rng)?;
        let sigma2 = ig(&post.sigma2, rng)?;
        let phi2 = ig(&post.phi2, rng)?;
        Ok((pi, rho2, sigma2, phi2))
    }

    /// One systematic-scan sweep, in place.
    pub fn sweep<R: Rng + ?Sized>(&self, st: &mut LatentState, rng: &mut R) -> Result<()> {
        for i in 0..self.ds.n() {
            st.y_aug[i] = self.sample_factor_scores(i, st, rng)?;
        }
        let stats = self.row_stats(st);
        for g in 0..self.ds.p() {
            let row = self.sample_inclusion_row_with(g, st, &stats, rng)?;
            for (a, z) in row.into_iter().enumerate() {
                st.z[(g, a)] = z;
            }
        }
        for g in 0..self.ds.p() {
            let row = self.sample_coefficient_row_with(g, st, &stats, rng)?;
            st.a.set_row(g, &row.transpose());
        }
        st.m = self.sample_subject_means(st, rng)?;
        let (pi, rho2, sigma2, phi2) = self.sample_conjugate_scalars(st, rng)?;
        st.pi = pi;
        st.rho2 = rho2;
        st.sigma2 = sigma2;
        st.phi2 = phi2;
        Ok(())
    }

    pub fn log_joint(&self, st: &LatentState) -> Result<f64> {
        Ok(model::complete_data_loglik(self.ds, st, &self.hp, self.prior)?.total())
    }

    /// Run `config.iterations` sweeps from `init`, keeping thinned post-burn-in states.
    pub fn run_chain(&self, config: &ChainConfig, init: LatentState) -> Result<ChainSamples> {
        config.validate()?;
        init.validate(self.ds)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut st = init;
        let mut draws = Vec::with_capacity(config.stored_draws());
        let mut log_joint = Vec::with_capacity(config.stored_draws());
        for s in 1..=config.iterations {
            self.sweep(&mut st, &mut rng)
                .map_err(|e| Error::Sweep { sweep: s, source: Box::new(e) })?;
            if config.keeps(s) {
                log_joint.push(self.log_joint(&st)?);
                draws.push(st.clone());
            }
        }
        Ok(ChainSamples { config: *config, draws, log_joint })
    }

    /// Independent chains in parallel; chain `c` starts from a diffuse state
    /// drawn with its own seed.
    pub fn run_chains(&self, configs: &[ChainConfig]) -> Result<Vec<ChainSamples>> {
        configs
            .par_iter()
            .map(|cfg| {
                let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
                let init = self.initial_state(&mut init_rng);
                self.run_chain(cfg, init)
            })
            .collect()
    }
}

/// See [`GibbsSampler::initial_state`].
pub fn initial_state<R: Rng + ?Sized>(ds: &Dataset, k: usize, prior: &PriorConfig, rng: &mut R) -> LatentState {
    let (n, p, q) = (ds.n(), ds.p(), ds.q());
    let e_pi = prior.expected_inclusion();
    let z = DMatrix::from_fn(p, k, |_, _| u8::from(rng.random::<f64>() < e_pi));
    let a = DMatrix::from_fn(p, k, |_, _| rng.sample(StandardNormal));
    let y_aug = (0..n).map(|_| DMatrix::from_fn(k, q, |_, _| rng.sample(StandardNormal))).collect();
    let m = DMatrix::from_fn(n, p, |_, g| prior.mu[g]);
    LatentState {
        m,
        y_aug,
        a,
        z,
        rho2: vec![1.0; k],
        pi: vec![e_pi.clamp(1e-6, 1.0 - 1e-6); k],
        sigma2: vec![1.0; p],
        phi2: vec![1.0; p],
    }
}

/// Posterior predictive draws at `new_times` for subject `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictive {
    pub times: Vec<f64>,
    /// One `p × m` matrix of biomarker values per stored draw.
    pub x: Vec<DMatrix<f64>>,
    /// One `k × m` matrix of factor scores per stored draw.
    pub y: Vec<DMatrix<f64>>,
}

/// Pointwise summaries of predictive draws.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveSummary {
    pub times: Vec<f64>,
    pub mean: DMatrix<f64>,
    pub median: DMatrix<f64>,
    pub lower: DMatrix<f64>,
    pub upper: DMatrix<f64>,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = prob * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl Predictive {
    /// Mean, median and central `level` interval (0.95 gives the 2.5/97.5 percentiles).
    pub fn summarize(&self, level: f64) -> PredictiveSummary {
        let (p, m) = self.x[0].shape();
        let nd = self.x.len() as f64;
        let mut mean = DMatrix::zeros(p, m);
        let mut median = DMatrix::zeros(p, m);
        let mut lower = DMatrix::zeros(p, m);
        let mut upper = DMatrix::zeros(p, m);
        let tail = 0.5 * (1.0 - level);
        for g in 0..p {
            for j in 0..m {
                let mut v: Vec<f64> = self.x.iter().map(|x| x[(g, j)]).collect();
                mean[(g, j)] = v.iter().sum::<f64>() / nd;
                v.sort_by(f64::total_cmp);
                median[(g, j)] = quantile_sorted(&v, 0.5);
                lower[(g, j)] = quantile_sorted(&v, tail);
                upper[(g, j)] = quantile_sorted(&v, 1.0 - tail);
            }
        }
        PredictiveSummary { times: self.times.clone(), mean, median, lower, upper }
    }
}

/// For every stored draw: `Y_i^new` from the GP conditional given the draw's
/// `Y_i,aug`, then `X_i^new` from the observation model. New times that lie on
/// the global grid reuse the draw's score there.
pub fn posterior_predictive<R: Rng + ?Sized>(
    ds: &Dataset,
    i: usize,
    new_times: &TimeGrid,
    draws: &[LatentState],
    hp: &MogpHyperparams,
    rng: &mut R,
) -> Result<Predictive> {
    if draws.is_empty() {
        return Err(Error::InvalidArgument("no posterior draws".into()));
    }
    if i >= ds.n() {
        return Err(Error::InvalidArgument(format!("subject index {i} out of range")));
    }
    let (p, k, q) = (ds.p(), hp.k(), ds.q());
    let times = new_times.as_slice();
    let on_grid: Vec<Option<usize>> = times.iter().map(|&t| ds.grid.position(t)).collect();
    let off: Vec<usize> = (0..times.len()).filter(|&j| on_grid[j].is_none()).collect();

    // GP conditional of the off-grid times given the full grid
    let conditional = if off.is_empty() {
        None
    } else {
        let mut joint: Vec<f64> = ds.grid.as_slice().to_vec();
        joint.extend(off.iter().map(|&j| times[j]));
        let qj = joint.len();
        let sigma = kernel::prior_correlation(hp, &joint)?;
        let g_idx: Vec<usize> = (0..k).flat_map(|a| (0..q).map(move |j| a * qj + j)).collect();
        let n_idx: Vec<usize> = (0..k).flat_map(|a| (q..qj).map(move |j| a * qj + j)).collect();
        let s_gg = sigma.select_rows(&g_idx).select_columns(&g_idx);
        let s_ng = sigma.select_rows(&n_idx).select_columns(&g_idx);
        let s_nn = sigma.select_rows(&n_idx).select_columns(&n_idx);
        let chol_gg = linalg::cholesky(&s_gg, "grid prior covariance")?;
        let reg = chol_gg.solve(&s_ng.transpose()).transpose();
        let mut cov = s_nn - &reg * s_ng.transpose();
        linalg::symmetrize(&mut cov);
        let chol = linalg::cholesky_jittered_scaled(&cov, 1.0, "predictive conditional covariance")?;
        Some((reg, chol))
    };
    let c_grid = model::mean_vector(hp, q);
    let c_new = model::mean_vector(hp, off.len());

    let m = times.len();
    let mut xs = Vec::with_capacity(draws.len());
    let mut ys = Vec::with_capacity(draws.len());
    for st in draws {
        let mut y_new = DMatrix::zeros(k, m);
        for (j, pos) in on_grid.iter().enumerate() {
            if let Some(g) = pos {
                for a in 0..k {
                    y_new[(a, j)] = st.y_aug[i][(a, *g)];
                }
            }
        }
        if let Some((reg, chol)) = &conditional {
            let mean = &c_new + reg * (vec_factor_major(&st.y_aug[i]) - &c_grid);
            let draw = linalg::sample_mvn(&mean, chol, rng);
            let no = off.len();
            for a in 0..k {
                for (jj, &j) in off.iter().enumerate() {
                    y_new[(a, j)] = draw[a * no + jj];
                }
            }
        }
        let fit = st.loadings() * &y_new;
        let mut x = DMatrix::zeros(p, m);
        for g in 0..p {
            let noise = Normal::new(0.0, st.phi2[g].sqrt())
                .map_err(|e| Error::Numerical(format!("residual sd: {e}")))?;
            for j in 0..m {
                x[(g, j)] = st.m[(i, g)] + fit[(g, j)] + noise.sample(rng);
            }
        }
        xs.push(x);
        ys.push(y_new);
    }
    Ok(Predictive { times: times.to_vec(), x: xs, y: ys })
}
