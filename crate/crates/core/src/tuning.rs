//! Cross-validated choice of the roughness penalty weight.
//!
//! Subjects are split into folds. For every (penalty, fold) cell the
//! hyperparameters are estimated by StEM on the training subjects. A Gibbs
//! chain under those hyperparameters then runs on the training subjects plus
//! the test subjects with their last observation time removed. The held-out
//! values are predicted by the posterior-predictive median.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gibbs::{self, posterior_predictive, ChainConfig, GibbsSampler};
use crate::kernel::TimeGrid;
use crate::model::{Dataset, PriorConfig};
use crate::stem::{run_stem, StemConfig};

/// Default fold count.
pub const DEFAULT_FOLDS: usize = 5;

/// `exp(−4), exp(−3.5), …, exp(4)`: 17 values.
pub fn default_grid() -> Vec<f64> {
    (0..17).map(|i| (-4.0 + 0.5 * i as f64).exp()).collect()
}

/// Fold assignment, penalty grid and held-out times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvPlan {
    /// Subject indices of each test fold, ascending.
    pub folds: Vec<Vec<usize>>,
    pub grid: Vec<f64>,
    /// Per subject, the index of its held-out (last) time; `None` for
    /// subjects with a single observation, which are never scored.
    pub held_out: Vec<Option<usize>>,
    pub seed: u64,
}

impl CvPlan {
    pub fn fold_count(&self) -> usize {
        self.folds.len()
    }

    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        if self.folds.len() < 2 {
            return Err(Error::InvalidArgument("need at least 2 folds".into()));
        }
        if self.grid.is_empty() || self.grid.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return Err(Error::InvalidArgument("penalty grid must be non-empty, finite and >= 0".into()));
        }
        if self.held_out.len() != ds.n() {
            return Err(Error::DimensionMismatch(format!(
                "plan covers {} subjects, dataset has {}",
                self.held_out.len(),
                ds.n()
            )));
        }
        let mut seen = vec![false; ds.n()];
        for f in &self.folds {
            for &i in f {
                if i >= ds.n() || seen[i] {
                    return Err(Error::InvalidArgument(format!("subject {i} is out of range or in two folds")));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidArgument("folds do not cover every subject".into()));
        }
        for (i, h) in self.held_out.iter().enumerate() {
            if let Some(j) = h {
                if *j >= ds.subjects[i].q() || ds.subjects[i].q() < 2 {
                    return Err(Error::InvalidArgument(format!("subject {i}: invalid held-out index {j}")));
                }
            }
        }
        Ok(())
    }

    /// Seed shared by every penalty value of one fold, so curves compare
    /// penalties under common random numbers.
    pub fn cell_seed(&self, fold: usize) -> u64 {
        ChaCha8Rng::seed_from_u64(self.seed ^ ((fold as u64 + 1) << 40)).next_u64()
    }
}

/// Random partition of subjects into `l` folds whose sizes differ by at most one.
pub fn make_plan(ds: &Dataset, l: usize, grid: Vec<f64>, seed: u64) -> Result<CvPlan> {
    if l < 2 {
        return Err(Error::InvalidArgument(format!("fold count {l} must be at least 2")));
    }
    if ds.n() < l {
        return Err(Error::InvalidArgument(format!("{} subjects cannot fill {l} folds", ds.n())));
    }
    let mut order: Vec<usize> = (0..ds.n()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); l];
    for (pos, i) in order.into_iter().enumerate() {
        folds[pos % l].push(i);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    let held_out = ds.subjects.iter().map(|s| (s.q() >= 2).then(|| s.q() - 1)).collect();
    let plan = CvPlan { folds, grid, held_out, seed };
    plan.validate(ds)?;
    Ok(plan)
}

/// One held-out (subject, time) with its true biomarker values.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub subject: String,
    /// Index of the subject within [`FoldData::conditioning`].
    pub conditioning_index: usize,
    pub time: f64,
    pub values: Vec<f64>,
}

/// Datasets used by one fold.
#[derive(Debug, Clone)]
pub struct FoldData {
    pub train: Dataset,
    /// Training subjects followed by the truncated test subjects.
    pub conditioning: Dataset,
    pub targets: Vec<Target>,
}

pub fn fold_data(ds: &Dataset, plan: &CvPlan, fold: usize) -> Result<FoldData> {
    let test = plan
        .folds
        .get(fold)
        .ok_or_else(|| Error::InvalidArgument(format!("fold {fold} out of range")))?;
    let train_idx: Vec<usize> = (0..ds.n()).filter(|i| !test.contains(i)).collect();
    let train = ds.select(&train_idx)?;

    let mut subjects: Vec<(String, Vec<f64>, nalgebra::DMatrix<f64>)> = train
        .subjects
        .iter()
        .map(|s| (s.id.clone(), s.times.as_slice().to_vec(), s.x.clone()))
        .collect();
    let mut targets = Vec::new();
    for &i in test {
        let s = &ds.subjects[i];
        let Some(h) = plan.held_out[i] else {
            subjects.push((s.id.clone(), s.times.as_slice().to_vec(), s.x.clone()));
            continue;
        };
        let keep: Vec<usize> = (0..s.q()).filter(|&j| j != h).collect();
        let times = keep.iter().map(|&j| s.times.as_slice()[j]).collect();
        targets.push(Target {
            subject: s.id.clone(),
            conditioning_index: subjects.len(),
            time: s.times.as_slice()[h],
            values: s.x.column(h).iter().copied().collect(),
        });
        subjects.push((s.id.clone(), times, s.x.select_columns(&keep)));
    }
    let conditioning = Dataset::new(ds.biomarkers.clone(), subjects)?;
    Ok(FoldData { train, conditioning, targets })
}

/// Check that no held-out value reaches training or conditioning data.
pub fn leakage_audit(ds: &Dataset, plan: &CvPlan) -> Result<()> {
    plan.validate(ds)?;
    for fold in 0..plan.fold_count() {
        let fd = fold_data(ds, plan, fold)?;
        for &i in &plan.folds[fold] {
            let id = &ds.subjects[i].id;
            if fd.train.subject_index(id).is_some() {
                return Err(Error::Data(format!("fold {fold}: test subject {id} is in the training set")));
            }
        }
        for t in &fd.targets {
            if fd.train.subject_index(&t.subject).is_some() {
                return Err(Error::Data(format!("fold {fold}: {} is in the training set", t.subject)));
            }
            let cond = &fd.conditioning.subjects[t.conditioning_index];
            if cond.id != t.subject || cond.times.position(t.time).is_some() {
                return Err(Error::Data(format!(
                    "fold {fold}: held-out time {} of {} is visible when conditioning",
                    t.time, t.subject
                )));
            }
        }
    }
    Ok(())
}

pub fn mean_absolute_error(predicted: &[f64], truth: &[f64]) -> Result<f64> {
    if predicted.len() != truth.len() || predicted.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions vs {} values",
            predicted.len(),
            truth.len()
        )));
    }
    let total: f64 = predicted.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum();
    Ok(total / predicted.len() as f64)
}

/// Outcome of one (penalty, fold) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvCell {
    pub lambda: f64,
    pub fold: usize,
    pub mae: Option<f64>,
    pub held_out_points: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub grid: Vec<f64>,
    /// Grid-major: all folds of the first penalty, then the next.
    pub cells: Vec<CvCell>,
    /// Fold-averaged MAE per penalty; `None` when any fold failed.
    pub mean_mae: Vec<Option<f64>>,
    pub lambda_opt: f64,
}

impl CvResult {
    /// Columns `lambda,fold,mae,mean_mae,error`.
    pub fn write_cells_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["lambda", "fold", "mae", "mean_mae", "error"])?;
        for c in &self.cells {
            let li = self.grid.iter().position(|&l| l == c.lambda).expect("cell penalty is on the grid");
            w.write_record([
                c.lambda.to_string(),
                (c.fold + 1).to_string(),
                opt(c.mae),
                opt(self.mean_mae[li]),
                c.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Columns `lambda,ln_lambda,mean_mae`, one row per grid value.
    pub fn write_curve_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["lambda", "ln_lambda", "mean_mae"])?;
        for (l, m) in self.grid.iter().zip(&self.mean_mae) {
            w.write_record([l.to_string(), l.ln().to_string(), opt(*m)])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Smallest fold-averaged MAE; exact ties go to the larger penalty.
pub fn select_lambda(grid: &[f64], mean_mae: &[Option<f64>]) -> Result<f64> {
    let mut best: Option<(f64, f64)> = None;
    for (&l, m) in grid.iter().zip(mean_mae) {
        let Some(m) = *m else { continue };
        best = match best {
            Some((bl, bm)) if bm < m || (bm == m && bl >= l) => Some((bl, bm)),
            _ => Some((l, m)),
        };
    }
    best.map(|(l, _)| l)
        .ok_or_else(|| Error::Numerical("every penalty value failed cross-validation".into()))
}

/// Run every (penalty, fold) cell in parallel and pick the penalty.
/// `stem` and `chain` give the per-cell budgets; their seeds and the penalty
/// are replaced per cell. The biomarker means of `prior` are re-estimated
/// from each cell's own data.
pub fn cv_lambda(
    ds: &Dataset,
    prior: &PriorConfig,
    k: usize,
    plan: &CvPlan,
    stem: &StemConfig,
    chain: &ChainConfig,
) -> Result<CvResult> {
    plan.validate(ds)?;
    stem.validate()?;
    chain.validate()?;
    let folds: Vec<FoldData> = (0..plan.fold_count()).map(|f| fold_data(ds, plan, f)).collect::<Result<_>>()?;
    let jobs: Vec<(f64, usize)> =
        plan.grid.iter().flat_map(|&l| (0..plan.fold_count()).map(move |f| (l, f))).collect();
    let cells: Vec<CvCell> = jobs
        .par_iter()
        .map(|&(lambda, fold)| {
            let fd = &folds[fold];
            let out = run_cell(fd, prior, k, lambda, plan.cell_seed(fold), stem, chain);
            let (mae, error) = match out {
                Ok(m) => (Some(m), None),
                Err(e) => (None, Some(e.to_string())),
            };
            CvCell { lambda, fold, mae, held_out_points: fd.targets.len() * ds.p(), error }
        })
        .collect();
    let l = plan.fold_count();
    let mean_mae: Vec<Option<f64>> = cells
        .chunks(l)
        .map(|cs| {
            let v: Option<Vec<f64>> = cs.iter().map(|c| c.mae).collect();
            v.map(|v| v.iter().sum::<f64>() / l as f64)
        })
        .collect();
    let lambda_opt = select_lambda(&plan.grid, &mean_mae)?;
    Ok(CvResult { grid: plan.grid.clone(), cells, mean_mae, lambda_opt })
}

fn run_cell(
    fd: &FoldData,
    prior: &PriorConfig,
    k: usize,
    lambda: f64,
    seed: u64,
    stem: &StemConfig,
    chain: &ChainConfig,
) -> Result<f64> {
    if fd.targets.is_empty() {
        return Err(Error::Data("fold has no held-out points".into()));
    }
    let mut sc = stem.clone();
    sc.lambda = lambda;
    sc.seed = seed;
    let train_prior = PriorConfig { mu: fd.train.biomarker_means(), ..prior.clone() };
    let fit = run_stem(&fd.train, &train_prior, k, &sc)?;

    let cond_prior = PriorConfig { mu: fd.conditioning.biomarker_means(), ..prior.clone() };
    let sampler = GibbsSampler::new(&fd.conditioning, &fit.estimate, &cond_prior)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let init = gibbs::initial_state(&fd.conditioning, k, &cond_prior, &mut rng);
    let cc = ChainConfig { seed: seed.wrapping_add(2), ..chain.clone() };
    let samples = sampler.run_chain(&cc, init)?;

    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for t in &fd.targets {
        let grid = TimeGrid::new(vec![t.time])?;
        let p = posterior_predictive(&fd.conditioning, t.conditioning_index, &grid, &samples.draws, &fit.estimate, &mut rng)?;
        let s = p.summarize(0.95);
        pred.extend(s.median.column(0).iter().copied());
        truth.extend(&t.values);
    }
    mean_absolute_error(&pred, &truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn toy(n: usize, q: usize) -> Dataset {
        let subs = (0..n)
            .map(|i| {
                let times = (0..q).map(|j| j as f64 / q as f64).collect();
                (format!("s{i}"), times, DMatrix::from_fn(2, q, |g, j| (i + g + j) as f64))
            })
            .collect();
        Dataset::new(vec!["a".into(), "b".into()], subs).unwrap()
    }

    #[test]
    fn default_grid_spans_seventeen_values() {
        let g = default_grid();
        assert_eq!(g.len(), 17);
        assert!((g[0] - 0.0183).abs() < 1e-4);
        assert!((g[16] - 54.598).abs() < 1e-3);
    }

    #[test]
    fn plan_examples() {
        let ds = toy(10, 3);
        let p = make_plan(&ds, 5, default_grid(), 3).unwrap();
        assert!(p.folds.iter().all(|f| f.len() == 2));
        assert_eq!(p, make_plan(&ds, 5, default_grid(), 3).unwrap());
        assert!(make_plan(&toy(3, 2), 5, default_grid(), 0).is_err());
        assert!(make_plan(&ds, 1, default_grid(), 0).is_err());
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mean_absolute_error(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mean_absolute_error(&[3.0, 3.0], &[4.0, 2.0]).unwrap(), 1.0);
        assert!((mean_absolute_error(&[0.0, 1.0, 5.0], &[0.5, -1.0, 5.0]).unwrap() - 2.5 / 3.0).abs() < 1e-15);
        assert!(mean_absolute_error(&[], &[]).is_err());
    }

    #[test]
    fn ties_go_to_larger_penalty() {
        let g = [0.1, 1.0, 10.0];
        assert_eq!(select_lambda(&g, &[Some(2.0), Some(1.0), Some(1.0)]).unwrap(), 10.0);
        assert_eq!(select_lambda(&g, &[Some(0.5), None, Some(1.0)]).unwrap(), 0.1);
        assert!(select_lambda(&g, &[None, None, None]).is_err());
    }

    #[test]
    fn folds_hold_out_last_time() {
        let ds = toy(6, 4);
        let plan = make_plan(&ds, 3, vec![1.0], 1).unwrap();
        leakage_audit(&ds, &plan).unwrap();
        let fd = fold_data(&ds, &plan, 0).unwrap();
        assert_eq!(fd.train.n(), 4);
        assert_eq!(fd.conditioning.n(), 6);
        for t in &fd.targets {
            assert_eq!(t.time, 0.75);
            assert_eq!(fd.conditioning.subjects[t.conditioning_index].q(), 3);
        }
    }
}
