//! Observed data, priors, latent state and the log densities of the factor model
//!
//! ```text
//! X_i = M_i + L Y_i + E_i,   L = A ∘ Z,   vec(Y_iᵀ) ~ MVN(C_i, Σ_Y_i)
//! ```
//!
//! with point-mass mixture priors on the loadings and Normal/Inverse-Gamma
//! priors on the subject-biomarker means and residual variances.

use std::collections::HashMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::kernel::{self, MogpHyperparams, TimeGrid};
use crate::linalg::{self, LN_2PI};

/// One subject: observation times and the `p × q_i` expression matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    pub times: TimeGrid,
    pub x: DMatrix<f64>,
    /// Position of each observation time on the global grid.
    pub grid_index: Vec<usize>,
}

impl Subject {
    pub fn q(&self) -> usize {
        self.times.len()
    }
}

/// Irregular longitudinal biomarker data for `n` subjects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub biomarkers: Vec<String>,
    pub subjects: Vec<Subject>,
    /// Union of all subject times.
    pub grid: TimeGrid,
}

impl Dataset {
    /// Build from `(id, times, X_i)` triples; `X_i` is `p × q_i`.
    pub fn new(biomarkers: Vec<String>, subjects: Vec<(String, Vec<f64>, DMatrix<f64>)>) -> Result<Self> {
        let p = biomarkers.len();
        if p == 0 {
            return Err(Error::Data("dataset has no biomarkers".into()));
        }
        if subjects.is_empty() {
            return Err(Error::Data("dataset has no subjects".into()));
        }
        let mut all: Vec<f64> = Vec::new();
        for (id, times, x) in &subjects {
            if x.nrows() != p || x.ncols() != times.len() {
                return Err(Error::DimensionMismatch(format!(
                    "subject {id}: matrix is {}x{}, expected {p}x{}",
                    x.nrows(),
                    x.ncols(),
                    times.len()
                )));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("subject {id}: non-finite expression value")));
            }
            all.extend(times);
        }
        all.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
        all.dedup();
        let grid = TimeGrid::new(all)?;
        let subjects = subjects
            .into_iter()
            .map(|(id, times, x)| {
                let times = TimeGrid::new(times)
                    .map_err(|e| Error::Data(format!("subject {id}: {e}")))?;
                let grid_index = times
                    .as_slice()
                    .iter()
                    .map(|&t| grid.position(t).expect("subject time is on the union grid"))
                    .collect();
                Ok(Subject { id, times, x, grid_index })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { biomarkers, subjects, grid })
    }

    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    pub fn p(&self) -> usize {
        self.biomarkers.len()
    }

    pub fn q(&self) -> usize {
        self.grid.len()
    }

    pub fn total_observations(&self) -> usize {
        self.subjects.iter().map(Subject::q).sum()
    }

    /// Mean of every biomarker over all subjects and times.
    pub fn biomarker_means(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.p()];
        for subj in &self.subjects {
            for g in 0..self.p() {
                s[g] += subj.x.row(g).sum();
            }
        }
        let n = self.total_observations() as f64;
        s.into_iter().map(|v| v / n).collect()
    }

    /// Subset of subjects, in the given order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let subs = idx
            .iter()
            .map(|&i| {
                let s = self.subjects.get(i).ok_or_else(|| {
                    Error::InvalidArgument(format!("subject index {i} out of range"))
                })?;
                Ok((s.id.clone(), s.times.as_slice().to_vec(), s.x.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.biomarkers.clone(), subs)
    }

    pub fn subject_index(&self, id: &str) -> Option<usize> {
        self.subjects.iter().position(|s| s.id == id)
    }

    /// Read long-format `subject_id,time,biomarker_id,value` records.
    /// Subjects and biomarkers keep their order of first appearance.
    pub fn read_long<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Data(format!("missing column {name}")))
        };
        let (ci, ct, cb, cv) = (col("subject_id")?, col("time")?, col("biomarker_id")?, col("value")?);

        let mut subject_order: Vec<String> = Vec::new();
        let mut biomarker_order: Vec<String> = Vec::new();
        let mut bio_pos: HashMap<String, usize> = HashMap::new();
        let mut cells: HashMap<String, Vec<(f64, usize, f64)>> = HashMap::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse = |c: usize| -> Result<f64> {
                rec.get(c)
                    .unwrap_or("")
                    .parse::<f64>()
                    .map_err(|e| Error::Data(format!("row {}: {e}", line + 2)))
            };
            let sid = rec.get(ci).unwrap_or("").to_string();
            let bid = rec.get(cb).unwrap_or("").to_string();
            let (t, v) = (parse(ct)?, parse(cv)?);
            if !t.is_finite() || !v.is_finite() {
                return Err(Error::Data(format!("row {}: non-finite time or value", line + 2)));
            }
            let g = *bio_pos.entry(bid.clone()).or_insert_with(|| {
                biomarker_order.push(bid.clone());
                biomarker_order.len() - 1
            });
            cells
                .entry(sid.clone())
                .or_insert_with(|| {
                    subject_order.push(sid.clone());
                    Vec::new()
                })
                .push((t, g, v));
        }
        let p = biomarker_order.len();
        let mut subjects = Vec::with_capacity(subject_order.len());
        for sid in subject_order {
            let rows = &cells[&sid];
            let mut times: Vec<f64> = rows.iter().map(|r| r.0).collect();
            times.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            times.dedup();
            let mut x = DMatrix::from_element(p, times.len(), f64::NAN);
            for &(t, g, v) in rows {
                let j = times.binary_search_by(|s| s.partial_cmp(&t).expect("finite")).expect("time present");
                if !x[(g, j)].is_nan() {
                    return Err(Error::Data(format!(
                        "subject {sid}: duplicate value for biomarker {} at time {t}",
                        biomarker_order[g]
                    )));
                }
                x[(g, j)] = v;
            }
            if let Some(pos) = x.iter().position(|v| v.is_nan()) {
                let (g, j) = (pos % p, pos / p);
                return Err(Error::Data(format!(
                    "subject {sid}: missing biomarker {} at time {}",
                    biomarker_order[g], times[j]
                )));
            }
            subjects.push((sid, times, x));
        }
        Self::new(biomarker_order, subjects)
    }

    pub fn read_long_path(path: &std::path::Path) -> Result<Self> {
        Self::read_long(std::fs::File::open(path)?)
    }

    /// Write long format, one row per (subject, time, biomarker).
    pub fn write_long<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["subject_id", "time", "biomarker_id", "value"])?;
        for s in &self.subjects {
            for (j, t) in s.times.as_slice().iter().enumerate() {
                for (g, b) in self.biomarkers.iter().enumerate() {
                    w.write_record([s.id.as_str(), &t.to_string(), b, &s.x[(g, j)].to_string()])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Hyperprior constants and the fixed biomarker means `μ_g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    /// Beta(c0, d0) prior on inclusion probabilities.
    pub c0: f64,
    pub d0: f64,
    /// Inverse-Gamma(c1, d1) prior on slab variances.
    pub c1: f64,
    pub d1: f64,
    /// Inverse-Gamma(c2, d2) prior on subject-mean variances.
    pub c2: f64,
    pub d2: f64,
    /// Inverse-Gamma(c3, d3) prior on residual variances.
    pub c3: f64,
    pub d3: f64,
    pub mu: Vec<f64>,
}

impl PriorConfig {
    /// `c0 = 0.1 p`, `d0 = 0.9 p`, unit Inverse-Gamma constants, empirical `μ_g`.
    pub fn default_for(ds: &Dataset) -> Self {
        let p = ds.p() as f64;
        Self {
            c0: 0.1 * p,
            d0: 0.9 * p,
            c1: 1.0,
            d1: 1.0,
            c2: 1.0,
            d2: 1.0,
            c3: 1.0,
            d3: 1.0,
            mu: ds.biomarker_means(),
        }
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        let consts = [self.c0, self.d0, self.c1, self.d1, self.c2, self.d2, self.c3, self.d3];
        if consts.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::InvalidArgument("prior constants must be positive and finite".into()));
        }
        if self.mu.len() != p {
            return Err(Error::DimensionMismatch(format!(
                "prior has {} biomarker means, dataset has {p} biomarkers",
                self.mu.len()
            )));
        }
        Ok(())
    }

    pub fn expected_inclusion(&self) -> f64 {
        self.c0 / (self.c0 + self.d0)
    }
}

/// Everything the Gibbs sampler updates: `{M, Y_aug, A, Z, ρ², π, σ², φ²}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    /// Subject-biomarker means, `n × p`.
    pub m: DMatrix<f64>,
    /// Factor scores on the global grid, one `k × q` matrix per subject.
    pub y_aug: Vec<DMatrix<f64>>,
    /// Slab coefficients, `p × k`.
    pub a: DMatrix<f64>,
    /// Inclusion indicators, `p × k`, entries 0 or 1.
    pub z: DMatrix<u8>,
    pub rho2: Vec<f64>,
    pub pi: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub phi2: Vec<f64>,
}

impl LatentState {
    pub fn k(&self) -> usize {
        self.a.ncols()
    }

    /// `L = A ∘ Z`.
    pub fn loadings(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.a.nrows(), self.a.ncols(), |g, a| {
            if self.z[(g, a)] == 1 {
                self.a[(g, a)]
            } else {
                0.0
            }
        })
    }

    /// Factor scores of subject `i` at its own observation times (`k × q_i`).
    pub fn observed_scores(&self, ds: &Dataset, i: usize) -> DMatrix<f64> {
        let s = &ds.subjects[i];
        self.y_aug[i].select_columns(&s.grid_index)
    }

    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        let (n, p, q) = (ds.n(), ds.p(), ds.q());
        let k = self.k();
        let dims_ok = self.m.shape() == (n, p)
            && self.y_aug.len() == n
            && self.y_aug.iter().all(|y| y.shape() == (k, q))
            && self.a.shape() == (p, k)
            && self.z.shape() == (p, k)
            && self.rho2.len() == k
            && self.pi.len() == k
            && self.sigma2.len() == p
            && self.phi2.len() == p;
        if !dims_ok {
            return Err(Error::DimensionMismatch("latent state does not match dataset".into()));
        }
        if self.z.iter().any(|&z| z > 1) {
            return Err(Error::InvalidArgument("inclusion indicators must be 0 or 1".into()));
        }
        let pos = self.rho2.iter().chain(&self.sigma2).chain(&self.phi2).all(|&v| v > 0.0 && v.is_finite());
        if !pos || self.pi.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            return Err(Error::InvalidArgument("variances must be positive and pi in (0,1)".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// `vec(Yᵀ)` of a `k × q` score matrix: factor-major, time within factor.
pub fn vec_factor_major(y: &DMatrix<f64>) -> DVector<f64> {
    let (k, q) = y.shape();
    DVector::from_fn(k * q, |r, _| y[(r / q, r % q)])
}

/// Inverse of [`vec_factor_major`].
pub fn unvec_factor_major(v: &DVector<f64>, k: usize, q: usize) -> DMatrix<f64> {
    DMatrix::from_fn(k, q, |a, j| v[a * q + j])
}

/// Mean vector `C` with `c_a` repeated `q` times per factor.
pub fn mean_vector(hp: &MogpHyperparams, q: usize) -> DVector<f64> {
    DVector::from_fn(hp.k() * q, |r, _| hp.c[r / q])
}

pub(crate) fn log_inverse_gamma(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - rate / x
}

pub(crate) fn log_beta_density(x: f64, a: f64, b: f64) -> f64 {
    (a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln() - (ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b))
}

/// Complete-data log density split by factor.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LogJoint {
    /// Gaussian observation model for X given M, L, Y, φ².
    pub observation: f64,
    /// MVN prior of the augmented factor scores.
    pub factor_scores: f64,
    /// N(μ_g, σ_g²) prior of the subject-biomarker means.
    pub means: f64,
    /// N(0, ρ_a²) prior of the slab coefficients.
    pub coefficients: f64,
    /// Bernoulli(π_a) prior of the inclusion indicators.
    pub inclusion: f64,
    /// Beta and Inverse-Gamma hyperpriors.
    pub hyperpriors: f64,
}

impl LogJoint {
    pub fn total(&self) -> f64 {
        self.observation + self.factor_scores + self.means + self.coefficients + self.inclusion + self.hyperpriors
    }
}

/// `ln f(X, Ω_aug | Θ, C)` term by term.
pub fn complete_data_loglik(
    ds: &Dataset,
    st: &LatentState,
    hp: &MogpHyperparams,
    prior: &PriorConfig,
) -> Result<LogJoint> {
    st.validate(ds)?;
    prior.validate(ds.p())?;
    if hp.k() != st.k() {
        return Err(Error::DimensionMismatch(format!(
            "state has k = {}, hyperparameters k = {}",
            st.k(),
            hp.k()
        )));
    }
    let (p, k) = (ds.p(), st.k());
    let l = st.loadings();
    let mut out = LogJoint::default();

    for (i, s) in ds.subjects.iter().enumerate() {
        let y = st.observed_scores(ds, i);
        let fit = &l * &y;
        for g in 0..p {
            let var = st.phi2[g];
            for j in 0..s.q() {
                out.observation += linalg::log_normal_density(s.x[(g, j)], st.m[(i, g)] + fit[(g, j)], var);
            }
        }
    }

    let q = ds.q();
    let sigma = kernel::prior_correlation(hp, ds.grid.as_slice())?;
    let chol = linalg::cholesky(&sigma, "factor-score prior covariance")?;
    let c = mean_vector(hp, q);
    for y in &st.y_aug {
        out.factor_scores += linalg::log_mvn_density(&vec_factor_major(y), &c, &chol);
    }

    for i in 0..ds.n() {
        for g in 0..p {
            out.means += linalg::log_normal_density(st.m[(i, g)], prior.mu[g], st.sigma2[g]);
        }
    }
    for g in 0..p {
        for a in 0..k {
            out.coefficients += linalg::log_normal_density(st.a[(g, a)], 0.0, st.rho2[a]);
            out.inclusion += if st.z[(g, a)] == 1 { st.pi[a].ln() } else { (1.0 - st.pi[a]).ln() };
        }
    }
    for a in 0..k {
        out.hyperpriors += log_beta_density(st.pi[a], prior.c0, prior.d0);
        out.hyperpriors += log_inverse_gamma(st.rho2[a], prior.c1, prior.d1);
    }
    for g in 0..p {
        out.hyperpriors += log_inverse_gamma(st.sigma2[g], prior.c2, prior.d2);
        out.hyperpriors += log_inverse_gamma(st.phi2[g], prior.c3, prior.d3);
    }
    Ok(out)
}

/// `Σ_i ln MVN(vec(Y_i,augᵀ) | C_aug, Σ_aug(Θ, t)) − λ Σ_a (B_a0 + B_a1)`.
///
/// Each entry of `y_samples` is a `k × q` matrix on `grid`.
pub fn penalized_objective(
    y_samples: &[DMatrix<f64>],
    grid: &TimeGrid,
    hp: &MogpHyperparams,
    lambda: f64,
) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument("penalty weight must be >= 0".into()));
    }
    let k = hp.k();
    let q = grid.len();
    if let Some(bad) = y_samples.iter().find(|y| y.shape() != (k, q)) {
        return Err(Error::DimensionMismatch(format!(
            "score sample is {}x{}, expected {k}x{q}",
            bad.nrows(),
            bad.ncols()
        )));
    }
    let sigma = kernel::prior_correlation(hp, grid.as_slice())?;
    let chol = linalg::cholesky(&sigma, "factor-score prior covariance")?;
    let logdet = linalg::log_det(&chol);
    let c = mean_vector(hp, q);
    let lower = chol.l_dirty().lower_triangle();
    let mut ll = 0.0;
    for y in y_samples {
        let r = vec_factor_major(y) - &c;
        let w = lower.solve_lower_triangular(&r).expect("positive diagonal");
        ll += -0.5 * ((k * q) as f64 * LN_2PI + logdet + w.norm_squared());
    }
    Ok(ll - lambda * hp.roughness())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_cell(x: f64) -> Dataset {
        Dataset::new(vec!["g1".into()], vec![("s1".into(), vec![0.0], DMatrix::from_element(1, 1, x))]).unwrap()
    }

    fn state(n: usize, p: usize, k: usize, q: usize) -> LatentState {
        LatentState {
            m: DMatrix::zeros(n, p),
            y_aug: vec![DMatrix::zeros(k, q); n],
            a: DMatrix::zeros(p, k),
            z: DMatrix::zeros(p, k),
            rho2: vec![1.0; k],
            pi: vec![0.5; k],
            sigma2: vec![1.0; p],
            phi2: vec![1.0; p],
        }
    }

    #[test]
    fn observation_term_at_zero_residual() {
        let ds = one_cell(3.0);
        let mut st = state(1, 1, 1, 1);
        st.m[(0, 0)] = 3.0;
        st.phi2[0] = 0.7;
        let hp = MogpHyperparams::uniform(1, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0).unwrap();
        let prior = PriorConfig::default_for(&ds);
        let lj = complete_data_loglik(&ds, &st, &hp, &prior).unwrap();
        assert!((lj.observation + 0.5 * (2.0 * std::f64::consts::PI * 0.7).ln()).abs() < 1e-14);
        // k = q = 1, unit variance after normalization, Y = 0, c = 0
        assert!((lj.factor_scores + 0.918_938_533_204_672_7).abs() < 1e-14);
    }

    #[test]
    fn penalized_objective_examples() {
        let g = TimeGrid::new(vec![0.0]).unwrap();
        let hp = MogpHyperparams::uniform(1, 1.0, 1.0, 0.5, 0.5, 0.0, 0.0).unwrap();
        let y = vec![DMatrix::zeros(1, 1)];
        let v = penalized_objective(&y, &g, &hp, 1.0).unwrap();
        assert!((v - (-0.918_938_533_204_672_7 - 1.0)).abs() < 1e-12);
        let v0 = penalized_objective(&y, &g, &hp, 0.0).unwrap();
        assert!((v0 + 0.918_938_533_204_672_7).abs() < 1e-12);
        let mut last = v0;
        for lam in [0.1, 1.0, 10.0] {
            let v = penalized_objective(&y, &g, &hp, lam).unwrap();
            assert!(v < last);
            last = v;
        }
        assert!(penalized_objective(&y, &g, &hp, -1.0).is_err());
    }

    #[test]
    fn vec_layout_is_factor_major() {
        let y = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let v = vec_factor_major(&y);
        assert_eq!(v.as_slice(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(unvec_factor_major(&v, 2, 3), y);
    }

    #[test]
    fn long_format_round_trip_and_grid() {
        let text = "subject_id,time,biomarker_id,value\n\
                    a,0,g1,1.5\na,0,g2,2\na,2,g1,3\na,2,g2,4\nb,1,g2,6\nb,1,g1,5\n";
        let ds = Dataset::read_long(text.as_bytes()).unwrap();
        assert_eq!(ds.n(), 2);
        assert_eq!(ds.p(), 2);
        assert_eq!(ds.grid.as_slice(), &[0.0, 1.0, 2.0]);
        assert_eq!(ds.subjects[0].grid_index, vec![0, 2]);
        assert_eq!(ds.subjects[1].x[(0, 0)], 5.0);
        let mut buf = Vec::new();
        ds.write_long(&mut buf).unwrap();
        let back = Dataset::read_long(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(ds.biomarker_means(), vec![(1.5 + 3.0 + 5.0) / 3.0, 4.0]);
    }

    #[test]
    fn loader_rejects_missing_and_duplicate_cells() {
        let missing = "subject_id,time,biomarker_id,value\na,0,g1,1\na,0,g2,2\na,1,g1,3\n";
        assert!(matches!(Dataset::read_long(missing.as_bytes()), Err(Error::Data(_))));
        let dup = "subject_id,time,biomarker_id,value\na,0,g1,1\na,0,g1,2\n";
        assert!(Dataset::read_long(dup.as_bytes()).is_err());
        let nan = "subject_id,time,biomarker_id,value\na,0,g1,NaN\n";
        assert!(Dataset::read_long(nan.as_bytes()).is_err());
    }

    #[test]
    fn default_prior_constants() {
        let ds = Dataset::new(
            (0..10).map(|g| format!("g{g}")).collect(),
            vec![("s".into(), vec![0.0], DMatrix::from_element(10, 1, 2.0))],
        )
        .unwrap();
        let pr = PriorConfig::default_for(&ds);
        assert!((pr.c0 - 1.0).abs() < 1e-12 && (pr.d0 - 9.0).abs() < 1e-12);
        assert!((pr.expected_inclusion() - 0.1).abs() < 1e-12);
        assert_eq!(pr.mu, vec![2.0; 10]);
    }

    #[test]
    fn state_snapshot_round_trip() {
        let mut st = state(2, 3, 2, 4);
        st.z[(1, 1)] = 1;
        st.a[(1, 1)] = -0.25;
        let back = LatentState::from_json(&st.to_json().unwrap()).unwrap();
        assert_eq!(back, st);
        assert_eq!(back.loadings()[(1, 1)], -0.25);
    }
}
