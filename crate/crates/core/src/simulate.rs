//! Synthetic longitudinal biomarker data with known loadings, factor
//! trajectories and factor cross-correlations, and recovery scoring.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Beta, Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{unvec_factor_major, Dataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub p: usize,
    pub k: usize,
    /// Observations per subject, evenly spaced on `[0, 1]`.
    pub q: usize,
    /// Lag-0 cross-correlation between factors (k × k, unit diagonal).
    pub correlation: DMatrix<f64>,
    /// Precision of the Gaussian temporal correlation `exp(−B² Δt² / 4)`.
    pub smoothness: f64,
    pub loading_mean: f64,
    pub loading_sd: f64,
    /// Expected fraction of biomarkers loading on each factor.
    pub sparsity: f64,
    /// Biomarker means `μ_g` are evenly spaced on this interval.
    pub mu_range: (f64, f64),
    /// Standard deviation of subject means around `μ_g`.
    pub sigma: f64,
    /// Residual standard deviation.
    pub phi: f64,
    /// Redraw any all-zero column of `Z` so every factor loads on at least
    /// one biomarker.
    pub min_one_loading: bool,
    pub seed: u64,
}

/// Pairwise 0.5 between factors 1–2 and 3–4, 0 elsewhere (a stand-in, not
/// fitted to any data). Only the leading `k × k` block is used.
pub fn default_correlation(k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(k, k, |a, b| {
        if a == b {
            1.0
        } else if a / 2 == b / 2 {
            0.5
        } else {
            0.0
        }
    })
}

impl SimConfig {
    pub fn new(n: usize, p: usize, k: usize, seed: u64) -> Self {
        Self {
            n,
            p,
            k,
            q: 8,
            correlation: default_correlation(k),
            smoothness: 5.0,
            loading_mean: 4.0,
            loading_sd: 1.0,
            sparsity: 0.1,
            mu_range: (4.0, 16.0),
            sigma: 0.5,
            phi: 0.5,
            min_one_loading: false,
            seed,
        }
    }

    pub fn times(&self) -> Vec<f64> {
        if self.q == 1 {
            return vec![0.0];
        }
        (0..self.q).map(|j| j as f64 / (self.q - 1) as f64).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.p == 0 || self.k == 0 || self.q == 0 {
            return Err(Error::InvalidArgument("n, p, k and q must be positive".into()));
        }
        let positive = [self.smoothness, self.loading_sd, self.sigma, self.phi];
        if positive.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument("scale parameters must be positive".into()));
        }
        if !(self.sparsity > 0.0 && self.sparsity < 1.0) {
            return Err(Error::InvalidArgument("sparsity must lie in (0, 1)".into()));
        }
        let r = &self.correlation;
        if r.shape() != (self.k, self.k) {
            return Err(Error::DimensionMismatch(format!(
                "correlation matrix is {}x{}, expected {}x{}",
                r.nrows(),
                r.ncols(),
                self.k,
                self.k
            )));
        }
        if (r - r.transpose()).amax() > 1e-12 || (0..self.k).any(|a| (r[(a, a)] - 1.0).abs() > 1e-12) {
            return Err(Error::InvalidArgument("correlation matrix must be symmetric with unit diagonal".into()));
        }
        linalg::cholesky(r, "factor correlation matrix")?;
        Ok(())
    }

    pub fn biomarker_means(&self) -> Vec<f64> {
        let (lo, hi) = self.mu_range;
        if self.p == 1 {
            return vec![0.5 * (lo + hi)];
        }
        (0..self.p).map(|g| lo + (hi - lo) * g as f64 / (self.p - 1) as f64).collect()
    }

    /// Covariance of `vec(Yᵀ)`: factor correlation ⊗ temporal correlation,
    /// with a small nugget renormalized to unit diagonal.
    pub fn score_covariance(&self) -> DMatrix<f64> {
        const NUGGET: f64 = 1e-4;
        let t = self.times();
        let q = t.len();
        let b2 = self.smoothness * self.smoothness;
        let kt = DMatrix::from_fn(q, q, |j, l| {
            let c = (-0.25 * b2 * (t[j] - t[l]).powi(2)).exp() + if j == l { NUGGET } else { 0.0 };
            c / (1.0 + NUGGET)
        });
        self.correlation.kronecker(&kt)
    }
}

/// Ground truth behind a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    pub inclusion_probability: Vec<f64>,
    pub z: DMatrix<u8>,
    /// Loadings `L = A ∘ Z` (p × k).
    pub loadings: DMatrix<f64>,
    /// Factor scores per subject (k × q).
    pub scores: Vec<DMatrix<f64>>,
    /// Subject-biomarker means (n × p).
    pub subject_means: DMatrix<f64>,
    pub biomarker_means: Vec<f64>,
    pub correlation: DMatrix<f64>,
    pub score_covariance: DMatrix<f64>,
}

impl SimTruth {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Draw a dataset: `π_a ~ Beta(s p, (1 − s) p)`, `Z_ga ~ Bernoulli(π_a)`,
/// nonzero loadings `N(mean, sd²)`, scores from [`SimConfig::score_covariance`],
/// `μ_ig ~ N(μ_g, σ²)` and `x = μ + L y + N(0, φ²)`.
pub fn generate<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> Result<(Dataset, SimTruth)> {
    cfg.validate()?;
    let (n, p, k, q) = (cfg.n, cfg.p, cfg.k, cfg.q);
    let beta = Beta::new(cfg.sparsity * p as f64, (1.0 - cfg.sparsity) * p as f64)
        .map_err(|e| Error::InvalidArgument(format!("inclusion prior: {e}")))?;
    let pi: Vec<f64> = (0..k).map(|_| beta.sample(rng)).collect();
    let mut z = DMatrix::<u8>::zeros(p, k);
    for a in 0..k {
        loop {
            for g in 0..p {
                z[(g, a)] = u8::from(rng.random::<f64>() < pi[a]);
            }
            if !cfg.min_one_loading || z.column(a).iter().any(|&v| v == 1) {
                break;
            }
        }
    }
    let slab = Normal::new(cfg.loading_mean, cfg.loading_sd).expect("validated");
    let loadings = DMatrix::from_fn(p, k, |g, a| {
        let v = slab.sample(rng);
        if z[(g, a)] == 1 {
            v
        } else {
            0.0
        }
    });

    let cov = cfg.score_covariance();
    let chol = linalg::cholesky(&cov, "simulated score covariance")?;
    let zero = DVector::zeros(k * q);
    let scores: Vec<DMatrix<f64>> =
        (0..n).map(|_| unvec_factor_major(&linalg::sample_mvn(&zero, &chol, rng), k, q)).collect();

    let mu = cfg.biomarker_means();
    let subject_means = DMatrix::from_fn(n, p, |_, g| mu[g] + cfg.sigma * rng.sample::<f64, _>(StandardNormal));
    let times = cfg.times();
    let subjects = scores
        .iter()
        .enumerate()
        .map(|(i, y)| {
            let fit = &loadings * y;
            let x = DMatrix::from_fn(p, q, |g, j| {
                subject_means[(i, g)] + fit[(g, j)] + cfg.phi * rng.sample::<f64, _>(StandardNormal)
            });
            (format!("s{}", i + 1), times.clone(), x)
        })
        .collect();
    let names = (1..=p).map(|g| format!("g{g}")).collect();
    let ds = Dataset::new(names, subjects)?;
    let truth = SimTruth {
        inclusion_probability: pi,
        z,
        loadings,
        scores,
        subject_means,
        biomarker_means: mu,
        correlation: cfg.correlation.clone(),
        score_covariance: cov,
    };
    Ok((ds, truth))
}

/// Mean absolute difference over the strictly lower triangle.
pub fn mad_cross_correlation(estimated: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    if estimated.shape() != truth.shape() || !estimated.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "estimated {:?} vs truth {:?}",
            estimated.shape(),
            truth.shape()
        )));
    }
    let k = estimated.nrows();
    if k < 2 {
        return Err(Error::InvalidArgument("cross-correlations need k >= 2".into()));
    }
    let mut total = 0.0;
    for a in 1..k {
        for b in 0..a {
            total += (estimated[(a, b)] - truth[(a, b)]).abs();
        }
    }
    Ok(total / (k * (k - 1) / 2) as f64)
}
