//! Convolution-process covariance functions for the multi-output GP prior on
//! factor trajectories.
//!
//! Every factor `a` is the sum of a shared component (a Gaussian kernel
//! `v_a0 exp(-B_a0² t² / 2)` convolved with a white-noise process common to all
//! factors), an idiosyncratic component (kernel `v_a1 exp(-B_a1² t² / 2)`
//! convolved with a factor-specific white noise) and i.i.d. noise `ψ²`.
//! Convolving two Gaussian kernels in closed form gives
//!
//! ```text
//! C_aa(d) = v_a0² √π / B_a0 · exp(-B_a0² d² / 4) + v_a1² √π / B_a1 · exp(-B_a1² d² / 4) [+ ψ² if d = 0]
//! C_ab(d) = v_a0 v_b0 √(2π) / √(B_a0² + B_b0²) · exp(-½ · B_a0² B_b0² / (B_a0² + B_b0²) · d²)
//! ```
//!
//! Factor indices are zero-based throughout the Rust API; the flat text record
//! uses one-based keys (`v0[1]`, ...).

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::linalg;

/// Kernel amplitudes, precisions, process noise and constant means, one entry
/// per factor for the vector fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MogpHyperparams {
    /// Shared-kernel amplitudes `v_a0`. The sign is meaningful: it sets the
    /// sign of cross-covariances.
    pub v0: Vec<f64>,
    /// Idiosyncratic-kernel amplitudes `v_a1`.
    pub v1: Vec<f64>,
    /// Shared-kernel precisions `B_a0 > 0`.
    pub b0: Vec<f64>,
    /// Idiosyncratic-kernel precisions `B_a1 > 0`.
    pub b1: Vec<f64>,
    /// Process noise variance `ψ² ≥ 0`.
    pub psi2: f64,
    /// Constant mean `c_a` of each factor trajectory.
    pub c: Vec<f64>,
}

impl MogpHyperparams {
    pub fn new(
        v0: Vec<f64>,
        v1: Vec<f64>,
        b0: Vec<f64>,
        b1: Vec<f64>,
        psi2: f64,
        c: Vec<f64>,
    ) -> Result<Self> {
        let hp = Self { v0, v1, b0, b1, psi2, c };
        hp.validate()?;
        Ok(hp)
    }

    /// Same hyperparameters for every factor.
    pub fn uniform(k: usize, v0: f64, v1: f64, b0: f64, b1: f64, psi2: f64, c: f64) -> Result<Self> {
        Self::new(vec![v0; k], vec![v1; k], vec![b0; k], vec![b1; k], psi2, vec![c; k])
    }

    pub fn k(&self) -> usize {
        self.v0.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.v0.len();
        if k == 0 {
            return Err(Error::InvalidArgument("hyperparameters need k >= 1".into()));
        }
        for (name, v) in [("v1", &self.v1), ("B0", &self.b0), ("B1", &self.b1), ("c", &self.c)] {
            if v.len() != k {
                return Err(Error::DimensionMismatch(format!(
                    "{name} has length {} but v0 has length {k}",
                    v.len()
                )));
            }
        }
        let all = self
            .v0
            .iter()
            .chain(&self.v1)
            .chain(&self.b0)
            .chain(&self.b1)
            .chain(&self.c)
            .chain(std::iter::once(&self.psi2));
        if all.into_iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite hyperparameter".into()));
        }
        if self.b0.iter().chain(&self.b1).any(|&b| b <= 0.0) {
            return Err(Error::InvalidArgument("kernel precisions B must be > 0".into()));
        }
        if self.psi2 < 0.0 {
            return Err(Error::InvalidArgument("psi2 must be >= 0".into()));
        }
        Ok(())
    }

    fn check_index(&self, a: usize) -> Result<()> {
        if a >= self.k() {
            Err(Error::FactorIndex { index: a, k: self.k() })
        } else {
            Ok(())
        }
    }

    /// Sum of all kernel precisions, the quantity the roughness penalty scales.
    pub fn roughness(&self) -> f64 {
        self.b0.iter().chain(&self.b1).sum()
    }

    /// Flat record `{v0[a], v1[a], B0[a], B1[a], psi2, c[a]}` with one-based `a`.
    pub fn to_record(&self) -> Map<String, Value> {
        let mut m = Map::new();
        for (prefix, vals) in [("v0", &self.v0), ("v1", &self.v1), ("B0", &self.b0), ("B1", &self.b1)] {
            for (a, v) in vals.iter().enumerate() {
                m.insert(format!("{prefix}[{}]", a + 1), Value::from(*v));
            }
        }
        m.insert("psi2".into(), Value::from(self.psi2));
        for (a, v) in self.c.iter().enumerate() {
            m.insert(format!("c[{}]", a + 1), Value::from(*v));
        }
        m
    }

    pub fn from_record(m: &Map<String, Value>) -> Result<Self> {
        let get = |key: &str| -> Result<f64> {
            m.get(key)
                .and_then(Value::as_f64)
                .ok_or_else(|| Error::Data(format!("hyperparameter record missing numeric key {key}")))
        };
        let mut k = 0;
        while m.contains_key(&format!("v0[{}]", k + 1)) {
            k += 1;
        }
        if k == 0 {
            return Err(Error::Data("hyperparameter record has no v0[1]".into()));
        }
        let field = |prefix: &str| -> Result<Vec<f64>> {
            (1..=k).map(|a| get(&format!("{prefix}[{a}]"))).collect()
        };
        Self::new(field("v0")?, field("v1")?, field("B0")?, field("B1")?, get("psi2")?, field("c")?)
    }

    /// Names of the flat-record keys in record order.
    pub fn record_keys(k: usize) -> Vec<String> {
        let mut keys = Vec::with_capacity(5 * k + 1);
        for prefix in ["v0", "v1", "B0", "B1"] {
            keys.extend((1..=k).map(|a| format!("{prefix}[{a}]")));
        }
        keys.push("psi2".into());
        keys.extend((1..=k).map(|a| format!("c[{a}]")));
        keys
    }

    /// Values in the order of [`MogpHyperparams::record_keys`].
    pub fn record_values(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(5 * self.k() + 1);
        v.extend(&self.v0);
        v.extend(&self.v1);
        v.extend(&self.b0);
        v.extend(&self.b1);
        v.push(self.psi2);
        v.extend(&self.c);
        v
    }

    /// Inverse of [`MogpHyperparams::record_values`].
    pub fn from_record_values(k: usize, v: &[f64]) -> Result<Self> {
        if v.len() != 5 * k + 1 {
            return Err(Error::DimensionMismatch(format!(
                "expected {} values for k = {k}, got {}",
                5 * k + 1,
                v.len()
            )));
        }
        Self::new(
            v[0..k].to_vec(),
            v[k..2 * k].to_vec(),
            v[2 * k..3 * k].to_vec(),
            v[3 * k..4 * k].to_vec(),
            v[4 * k],
            v[4 * k + 1..].to_vec(),
        )
    }
}

/// Strictly increasing, finite time points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TimeGrid(Vec<f64>);

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::InvalidArgument("time grid is empty".into()));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument("time grid has non-finite entries".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(
                "time grid must be strictly increasing without duplicates".into(),
            ));
        }
        Ok(Self(times))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Position of `t` on the grid, if present exactly.
    pub fn position(&self, t: f64) -> Option<usize> {
        self.0.binary_search_by(|x| x.partial_cmp(&t).expect("finite")).ok()
    }
}

impl TryFrom<Vec<f64>> for TimeGrid {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<TimeGrid> for Vec<f64> {
    fn from(g: TimeGrid) -> Self {
        g.0
    }
}

fn gaussian_auto(v: f64, b: f64, dt: f64) -> f64 {
    v * v * PI.sqrt() / b * (-0.25 * b * b * dt * dt).exp()
}

fn gaussian_cross(va: f64, ba: f64, vb: f64, bb: f64, dt: f64) -> f64 {
    let s = ba * ba + bb * bb;
    va * vb * (2.0 * PI).sqrt() / s.sqrt() * (-0.5 * ba * ba * bb * bb / s * dt * dt).exp()
}

/// Within-factor covariance at lag `dt`; adds `ψ²` only when `include_noise`
/// and `dt == 0`.
pub fn auto_covariance(a: usize, dt: f64, hp: &MogpHyperparams, include_noise: bool) -> Result<f64> {
    hp.check_index(a)?;
    if !dt.is_finite() {
        return Err(Error::InvalidArgument("non-finite time difference".into()));
    }
    let mut c = gaussian_auto(hp.v0[a], hp.b0[a], dt) + gaussian_auto(hp.v1[a], hp.b1[a], dt);
    if include_noise && dt == 0.0 {
        c += hp.psi2;
    }
    Ok(c)
}

/// Covariance between factors `a != b` at lag `dt`, from the shared component only.
pub fn cross_covariance(a: usize, b: usize, dt: f64, hp: &MogpHyperparams) -> Result<f64> {
    hp.check_index(a)?;
    hp.check_index(b)?;
    if a == b {
        return Err(Error::InvalidArgument(
            "cross_covariance needs distinct factors; use auto_covariance".into(),
        ));
    }
    if !dt.is_finite() {
        return Err(Error::InvalidArgument("non-finite time difference".into()));
    }
    Ok(gaussian_cross(hp.v0[a], hp.b0[a], hp.v0[b], hp.b0[b], dt))
}

/// Lag-0 cross-correlation between factors `a` and `b` (1 when `a == b`).
pub fn cross_correlation(a: usize, b: usize, hp: &MogpHyperparams) -> Result<f64> {
    let va = auto_covariance(a, 0.0, hp, true)?;
    let vb = auto_covariance(b, 0.0, hp, true)?;
    if va <= 0.0 || vb <= 0.0 {
        let zero = if va <= 0.0 { a } else { b };
        return Err(Error::Numerical(format!("factor {zero} has zero variance")));
    }
    if a == b {
        return Ok(1.0);
    }
    Ok(cross_covariance(a, b, 0.0, hp)? / (va * vb).sqrt())
}

/// k×k matrix of lag-0 cross-correlations.
pub fn correlation_matrix(hp: &MogpHyperparams) -> Result<DMatrix<f64>> {
    let k = hp.k();
    let mut m = DMatrix::identity(k, k);
    for a in 0..k {
        for b in (a + 1)..k {
            let r = cross_correlation(a, b, hp)?;
            m[(a, b)] = r;
            m[(b, a)] = r;
        }
    }
    Ok(m)
}

/// Covariance of `vec(Yᵀ)` over `grid` (factor-major: index `a * q + j`),
/// checked for positive definiteness.
pub fn assemble_covariance(hp: &MogpHyperparams, grid: &TimeGrid, k: usize) -> Result<DMatrix<f64>> {
    let m = assemble_unchecked(hp, grid.as_slice(), k)?;
    if linalg::cholesky(&m, "").is_err() {
        return Err(Error::NotPositiveDefinite(format!(
            "assembled covariance on {} time points with hyperparameters {:?}",
            grid.len(),
            hp
        )));
    }
    Ok(m)
}

/// Assembly without the definiteness check; `times` need not be sorted (used
/// for joint grids that mix observed and new times).
pub(crate) fn assemble_unchecked(hp: &MogpHyperparams, times: &[f64], k: usize) -> Result<DMatrix<f64>> {
    if k == 0 || k != hp.k() {
        return Err(Error::DimensionMismatch(format!(
            "k = {k} but hyperparameters describe {} factors",
            hp.k()
        )));
    }
    let q = times.len();
    if q == 0 {
        return Err(Error::InvalidArgument("degenerate (empty) time grid".into()));
    }
    let mut m = DMatrix::zeros(k * q, k * q);
    for a in 0..k {
        for b in a..k {
            for j in 0..q {
                for l in 0..q {
                    let dt = times[j] - times[l];
                    let v = if a == b {
                        let mut c = gaussian_auto(hp.v0[a], hp.b0[a], dt)
                            + gaussian_auto(hp.v1[a], hp.b1[a], dt);
                        if j == l {
                            c += hp.psi2;
                        }
                        c
                    } else {
                        gaussian_cross(hp.v0[a], hp.b0[a], hp.v0[b], hp.b0[b], dt)
                    };
                    m[(a * q + j, b * q + l)] = v;
                    m[(b * q + l, a * q + j)] = v;
                }
            }
        }
    }
    Ok(m)
}

/// Rescale a factor-major covariance so every factor has unit variance.
pub fn normalize_to_correlation(sigma: &DMatrix<f64>, k: usize, q: usize) -> Result<DMatrix<f64>> {
    if sigma.nrows() != k * q || sigma.ncols() != k * q {
        return Err(Error::DimensionMismatch(format!(
            "matrix is {}x{}, expected {}x{}",
            sigma.nrows(),
            sigma.ncols(),
            k * q,
            k * q
        )));
    }
    let mut d = vec![0.0; k];
    for (a, da) in d.iter_mut().enumerate() {
        let first = sigma[(a * q, a * q)];
        if first <= 0.0 {
            return Err(Error::Numerical(format!("non-positive variance for factor {a}")));
        }
        for j in 1..q {
            let x = sigma[(a * q + j, a * q + j)];
            if (x - first).abs() > 1e-10 * first.abs() {
                return Err(Error::InvalidArgument(format!(
                    "diagonal of factor {a} is not constant ({first} vs {x})"
                )));
            }
        }
        *da = first;
    }
    let scale: Vec<f64> = (0..k * q).map(|r| d[r / q].sqrt()).collect();
    Ok(DMatrix::from_fn(k * q, k * q, |r, s| {
        if r == s {
            1.0
        } else {
            sigma[(r, s)] / (scale[r] * scale[s])
        }
    }))
}

/// Prior covariance of the factor scores used by the factor model: the
/// assembled covariance rescaled to unit factor variance.
pub fn prior_correlation(hp: &MogpHyperparams, times: &[f64]) -> Result<DMatrix<f64>> {
    let k = hp.k();
    let q = times.len();
    let raw = assemble_unchecked(hp, times, k)?;
    normalize_to_correlation(&raw, k, q)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn symmetric_unit() -> MogpHyperparams {
        MogpHyperparams::uniform(2, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0).unwrap()
    }

    #[test]
    fn auto_covariance_examples() {
        let hp = MogpHyperparams::uniform(1, 1.0, 0.0, PI.sqrt(), 1.0, 0.0, 0.0).unwrap();
        assert!((auto_covariance(0, 0.0, &hp, true).unwrap() - 1.0).abs() < 1e-15);

        let hp = MogpHyperparams::uniform(1, 0.0, 0.0, 1.0, 1.0, 0.25, 0.0).unwrap();
        assert_eq!(auto_covariance(0, 0.0, &hp, true).unwrap(), 0.25);
        assert_eq!(auto_covariance(0, 0.0, &hp, false).unwrap(), 0.0);

        let hp = MogpHyperparams::uniform(1, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0).unwrap();
        let v = auto_covariance(0, 1.0, &hp, true).unwrap();
        assert!((v - 2.0 * PI.sqrt() * (-0.25f64).exp()).abs() < 1e-14);
        assert!((v - 2.7608).abs() < 1e-4);
    }

    #[test]
    fn auto_covariance_rejects_bad_inputs() {
        let hp = symmetric_unit();
        assert!(matches!(auto_covariance(2, 0.0, &hp, true), Err(Error::FactorIndex { .. })));
        assert!(auto_covariance(0, f64::NAN, &hp, true).is_err());
    }

    #[test]
    fn cross_covariance_examples() {
        let mut hp = symmetric_unit();
        assert!((cross_covariance(0, 1, 0.0, &hp).unwrap() - PI.sqrt()).abs() < 1e-14);
        let v = cross_covariance(0, 1, 2.0, &hp).unwrap();
        assert!((v - PI.sqrt() * (-1.0f64).exp()).abs() < 1e-14);
        assert!((v - 0.6520).abs() < 1e-4);
        hp.v0[0] = 0.0;
        assert_eq!(cross_covariance(0, 1, 0.7, &hp).unwrap(), 0.0);
        assert!(cross_covariance(1, 1, 0.0, &hp).is_err());
    }

    #[test]
    fn cross_correlation_examples() {
        let hp = symmetric_unit();
        assert!((cross_correlation(0, 1, &hp).unwrap() - 0.5).abs() < 1e-14);
        let mut only_shared = hp.clone();
        only_shared.v1 = vec![0.0, 0.0];
        assert!((cross_correlation(0, 1, &only_shared).unwrap() - 1.0).abs() < 1e-14);
        let mut no_shared = hp.clone();
        no_shared.v0[0] = 0.0;
        assert_eq!(cross_correlation(0, 1, &no_shared).unwrap(), 0.0);
        let zero = MogpHyperparams::uniform(2, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0).unwrap();
        assert!(cross_correlation(0, 1, &zero).is_err());
    }

    #[test]
    fn assemble_examples() {
        let hp = MogpHyperparams::uniform(1, 1.0, 0.0, PI.sqrt(), 1.0, 0.3, 0.0).unwrap();
        let g = TimeGrid::new(vec![0.0]).unwrap();
        let m = assemble_covariance(&hp, &g, 1).unwrap();
        assert!((m[(0, 0)] - 1.3).abs() < 1e-14);

        let hp = symmetric_unit();
        let g = TimeGrid::new(vec![0.0, 0.5]).unwrap();
        let m = assemble_covariance(&hp, &g, 2).unwrap();
        // one-based (1,3) is the lag-0 cross entry between factor 1 and factor 2
        assert_eq!(m[(0, 2)], cross_covariance(0, 1, 0.0, &hp).unwrap());
        assert_eq!(m[(0, 3)], cross_covariance(0, 1, -0.5, &hp).unwrap());
        assert_eq!(m[(1, 1)], auto_covariance(1, 0.0, &hp, true).unwrap());
        assert_eq!(m[(0, 1)], auto_covariance(0, 0.5, &hp, true).unwrap());
        assert!(assemble_covariance(&hp, &g, 3).is_err());
    }

    #[test]
    fn normalize_examples() {
        let id = DMatrix::<f64>::identity(3, 3);
        assert_eq!(normalize_to_correlation(&id, 3, 1).unwrap(), id);
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 4.0]);
        let n = normalize_to_correlation(&m, 2, 1).unwrap();
        assert_eq!(n, DMatrix::from_row_slice(2, 2, &[1.0, 0.25, 0.25, 1.0]));

        let hp = symmetric_unit();
        let g = TimeGrid::new(vec![0.0, 0.5]).unwrap();
        let n = normalize_to_correlation(&assemble_covariance(&hp, &g, 2).unwrap(), 2, 2).unwrap();
        assert!((n[(0, 2)] - 0.5).abs() < 1e-14);
        assert!((n[(1, 3)] - 0.5).abs() < 1e-14);
        assert!((0..4).all(|i| n[(i, i)] == 1.0));
    }

    #[test]
    fn normalize_rejects_nonconstant_diagonal() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 2.0]);
        assert!(normalize_to_correlation(&m, 1, 2).is_err());
        let m = DMatrix::from_row_slice(1, 1, &[0.0]);
        assert!(normalize_to_correlation(&m, 1, 1).is_err());
    }

    #[test]
    fn grid_rules() {
        assert!(TimeGrid::new(vec![0.0, 0.0]).is_err());
        assert!(TimeGrid::new(vec![1.0, 0.0]).is_err());
        assert!(TimeGrid::new(vec![0.0, f64::INFINITY]).is_err());
        let g = TimeGrid::new(vec![0.0, 0.25, 1.0]).unwrap();
        assert_eq!(g.position(0.25), Some(1));
        assert_eq!(g.position(0.3), None);
    }

    #[test]
    fn record_round_trip() {
        let hp = MogpHyperparams::new(
            vec![0.5, -1.0],
            vec![1.0, 2.0],
            vec![3.0, 4.0],
            vec![5.0, 6.0],
            0.1,
            vec![-0.2, 0.3],
        )
        .unwrap();
        let rec = hp.to_record();
        assert_eq!(rec["B1[2]"], Value::from(6.0));
        assert_eq!(MogpHyperparams::from_record(&rec).unwrap(), hp);
        let keys: Vec<String> = rec.keys().cloned().collect();
        assert_eq!(keys, MogpHyperparams::record_keys(2));
        assert_eq!(MogpHyperparams::from_record_values(2, &hp.record_values()).unwrap(), hp);
    }

    #[test]
    fn validation() {
        assert!(MogpHyperparams::uniform(2, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0).is_err());
        assert!(MogpHyperparams::uniform(2, 1.0, 1.0, 1.0, 1.0, -1.0, 0.0).is_err());
        assert!(MogpHyperparams::new(vec![1.0], vec![1.0, 1.0], vec![1.0], vec![1.0], 0.0, vec![0.0]).is_err());
    }
}
