use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use mogp_dfa::alignment::{align_chains, align_correlation, align_to_reference};
use mogp_dfa::gibbs::{posterior_predictive, ChainConfig, GibbsSampler};
use mogp_dfa::kernel::correlation_matrix;
use mogp_dfa::preprocess::{icc_distance_diagnostic, map_dataset, regress_out_age, read_ages, standardize_times};
use mogp_dfa::report::{
    chain_metadata, loading_table, read_matrix_csv, write_chain_samples_csv, write_loading_table_csv,
    write_matrix_csv, write_trajectory_draws_csv,
};
use mogp_dfa::simulate::{generate, mad_cross_correlation, SimTruth};
use mogp_dfa::stem::{trace_diagnostics, StemRunner, StemTrace};
use mogp_dfa::tuning::{cv_lambda, default_grid, make_plan};
use mogp_dfa::{Dataset, LatentState, MogpHyperparams, TimeGrid};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{AlignKind, RunConfig};

pub const FIT_DATA: &str = "fit_data.csv";
pub const FIT_RECORD: &str = "hyperparameters.json";
pub const FIT_DRAWS: &str = "posterior_draws.json";

/// Output directory handle.
pub struct Out {
    dir: PathBuf,
}

impl Out {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn create(&self, name: &str) -> Result<BufWriter<File>> {
        let path = self.path(name);
        let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        Ok(BufWriter::new(f))
    }

    pub fn text(&self, name: &str, contents: &str) -> Result<()> {
        let mut w = self.create(name)?;
        w.write_all(contents.as_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.text(name, &s)
    }

    /// Write through a fallible writer callback, flushing at the end.
    pub fn with<F>(&self, name: &str, f: F) -> Result<()>
    where
        F: FnOnce(&mut BufWriter<File>) -> mogp_dfa::Result<()>,
    {
        let mut w = self.create(name)?;
        f(&mut w).with_context(|| format!("writing {name}"))?;
        w.flush()?;
        Ok(())
    }
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg.data.path.as_ref().ok_or_else(|| anyhow!("data.path is required"))?;
    Dataset::read_long_path(path).with_context(|| format!("loading {}", path.display()))
}

/// Loaded data, standardized when configured, with the time scale.
fn fitting_data(cfg: &RunConfig) -> Result<(Dataset, f64)> {
    let raw = load_data(cfg)?;
    if cfg.data.standardize_times {
        Ok(standardize_times(&raw)?)
    } else {
        Ok((raw, 1.0))
    }
}

pub fn simulate(cfg: &RunConfig, out: &Out) -> Result<()> {
    let sim = cfg.simulate.build(cfg.seed)?;
    let (ds, truth) = generate(&sim, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    out.with("data.csv", |w| ds.write_long(w))?;
    out.text("truth.json", &(truth.to_json()? + "\n"))?;
    out.with("truth_correlation.csv", |w| write_matrix_csv(&truth.correlation, w))?;
    out.with("truth_loadings.csv", |w| write_matrix_csv(&truth.loadings, w))?;
    let per_factor: Vec<f64> = (0..sim.k)
        .map(|a| truth.z.column(a).iter().map(|&v| f64::from(v)).sum::<f64>() / sim.p as f64)
        .collect();
    let overall = per_factor.iter().sum::<f64>() / sim.k as f64;
    out.json(
        "simulate_summary.json",
        &json!({ "n": sim.n, "p": sim.p, "k": sim.k, "q": sim.q, "rows": ds.total_observations() * sim.p,
                 "realized_sparsity": overall, "realized_sparsity_per_factor": per_factor }),
    )?;
    println!("simulated n = {}, p = {}, k = {}, q = {}; realized sparsity {overall:.3}", sim.n, sim.p, sim.k, sim.q);
    Ok(())
}

pub fn preprocess(cfg: &RunConfig, out: &Out) -> Result<()> {
    let mut ds = load_data(cfg)?;
    let mut summary = serde_json::Map::new();
    if let Some(path) = &cfg.preprocess.ages {
        let ages = read_ages(File::open(path).with_context(|| format!("opening {}", path.display()))?)?;
        ds = regress_out_age(&ds, &ages).context("regressing out age")?;
        summary.insert("age_regressed".into(), json!(true));
    } else {
        summary.insert("age_regressed".into(), json!(false));
    }
    if let Some(reference) = cfg.preprocess.reference()? {
        let (mapped, mappings, records) = map_dataset(&ds, &reference).context("mapping to reference grid")?;
        let before: Vec<Vec<f64>> = mappings.iter().map(|m| m.original.clone()).collect();
        let after: Vec<Vec<f64>> = mappings.iter().map(|m| m.mapped.clone()).collect();
        let icc = icc_distance_diagnostic(&before, &after).ok();
        let merged = records.iter().filter(|r| r.merged).count();
        out.with("grid_mapping.csv", |w| mogp_dfa::preprocess::write_mapping_csv(&records, w))?;
        summary.insert("mapped".into(), json!(true));
        summary.insert("icc".into(), json!(icc));
        summary.insert("merged_observations".into(), json!(merged));
        match icc {
            Some(v) => println!("mapped onto {} reference times; distance ICC {v:.3}; {merged} merged", reference.len()),
            None => println!("mapped onto {} reference times; too few gaps for ICC", reference.len()),
        }
        ds = mapped;
    } else {
        summary.insert("mapped".into(), json!(false));
    }
    out.with("data.csv", |w| ds.write_long(w))?;
    out.json("preprocess_summary.json", &summary)?;
    Ok(())
}

/// Contents of the fit record read back by `predict`.
#[derive(Debug, Serialize, Deserialize)]
pub struct FitRecord {
    pub k: usize,
    pub lambda: f64,
    /// Largest original time; standardized times are original / scale.
    pub time_scale: f64,
    pub hyperparameters: serde_json::Map<String, serde_json::Value>,
}

fn write_trace(out: &Out, trace: &StemTrace) -> Result<()> {
    out.with("stem_trace.csv", |w| trace.write_csv(w))
}

pub fn fit(cfg: &RunConfig, out: &Out) -> Result<()> {
    let (ds, scale) = fitting_data(cfg)?;
    let k = cfg.model.k;
    let prior = cfg.prior.build(&ds)?;
    let stem_cfg = cfg.stem.build(k, cfg.model.lambda, cfg.seed)?;
    let chain_cfgs = cfg.gibbs.build(cfg.seed.wrapping_add(1))?;
    let truth = match &cfg.data.truth {
        Some(p) => Some(SimTruth::from_json(&std::fs::read_to_string(p)?).context("reading truth")?),
        None => None,
    };
    out.with(FIT_DATA, |w| ds.write_long(w))?;

    let (burnin, window) = (stem_cfg.burnin(), stem_cfg.window());
    let mut runner = StemRunner::new(&ds, &prior, stem_cfg, k)?;
    while !runner.is_done() {
        if let Err(e) = runner.step() {
            let partial = StemTrace { iterates: runner.iterates().to_vec(), burnin, window };
            write_trace(out, &partial)?;
            return Err(e).context("StEM");
        }
        let every = cfg.stem.checkpoint_every;
        if every > 0 && runner.completed() % every == 0 {
            out.text("stem_checkpoint.json", &runner.checkpoint().to_json()?)?;
        }
    }
    let stem = runner.finish()?;
    write_trace(out, &stem.trace)?;
    match trace_diagnostics(&stem.trace) {
        Ok(rows) => {
            let mut w = csv::Writer::from_writer(out.create("stem_diagnostics.csv")?);
            w.write_record(["parameter", "running_mean", "lag1_autocorrelation", "geweke_z", "stationary"])?;
            for r in rows {
                let last = r.running_mean.last().copied().unwrap_or(f64::NAN);
                w.write_record([
                    r.name,
                    last.to_string(),
                    r.lag1_autocorrelation.to_string(),
                    r.geweke_z.to_string(),
                    r.stationary.to_string(),
                ])?;
            }
            w.flush()?;
        }
        Err(e) => println!("skipping StEM diagnostics: {e}"),
    }
    let hp = stem.estimate;
    out.json(
        FIT_RECORD,
        &FitRecord { k, lambda: cfg.model.lambda, time_scale: scale, hyperparameters: hp.to_record() },
    )?;
    let corr = correlation_matrix(&hp)?;
    out.with("correlation.csv", |w| write_matrix_csv(&corr, w))?;

    let sampler = GibbsSampler::new(&ds, &hp, &prior)?;
    let chains = sampler.run_chains(&chain_cfgs).context("posterior chains")?;
    let chains = align_chains(&chains).context("aligning chains")?;
    out.with("chain_samples.csv", |w| write_chain_samples_csv(&chains, &ds.biomarkers, w))?;
    out.json("chain_metadata.json", &chain_metadata(&chains))?;
    out.with("trajectories.csv", |w| write_trajectory_draws_csv(&ds, &chains, scale, w))?;
    let pooled: Vec<LatentState> = chains.iter().flat_map(|c| c.draws.iter().cloned()).collect();
    let table = loading_table(&pooled, &ds.biomarkers, cfg.gibbs.interval_level)?;
    out.with("loadings.csv", |w| write_loading_table_csv(&table, w))?;
    out.json(FIT_DRAWS, &pooled)?;

    println!("fitted k = {k} at lambda = {} on n = {}, p = {}", cfg.model.lambda, ds.n(), ds.p());
    for a in 0..k {
        for b in 0..a {
            println!("  cross-correlation ({}, {}) = {:.3}", b + 1, a + 1, corr[(a, b)]);
        }
    }
    if let Some(truth) = truth {
        compare_to_truth(out, &truth, &pooled, &corr)?;
    }
    Ok(())
}

fn compare_to_truth(out: &Out, truth: &SimTruth, draws: &[LatentState], corr: &DMatrix<f64>) -> Result<()> {
    if truth.loadings.shape() != draws[0].a.shape() {
        println!("truth has shape {:?}, fit has {:?}; skipping truth comparison", truth.loadings.shape(), draws[0].a.shape());
        return Ok(());
    }
    let mean = draws.iter().fold(DMatrix::zeros(truth.loadings.nrows(), truth.loadings.ncols()), |acc, st| {
        acc + st.loadings()
    }) / draws.len() as f64;
    let al = align_to_reference(&mean, &truth.loadings)?;
    let aligned_corr = al.sp.apply_correlation(corr)?;
    let mad = mad_cross_correlation(&aligned_corr, &truth.correlation)?;
    let perm: Vec<usize> = al.sp.perm().iter().map(|p| p + 1).collect();
    out.json(
        "truth_comparison.json",
        &json!({ "cross_correlation_mad": mad, "loading_mad": al.mad, "permutation": perm, "signs": al.sp.signs() }),
    )?;
    println!("truth-aligned cross-correlation MAD {mad:.4} (loading MAD {:.4})", al.mad);
    Ok(())
}

pub fn cv(cfg: &RunConfig, out: &Out) -> Result<()> {
    let (ds, _) = fitting_data(cfg)?;
    let k = cfg.model.k;
    let prior = cfg.prior.build(&ds)?;
    let grid = cfg.cv.grid.clone().unwrap_or_else(default_grid);
    let plan = make_plan(&ds, cfg.cv.folds, grid, cfg.seed)?;
    let mut section = cfg.stem.clone();
    section.iterations = cfg.cv.stem_iterations;
    section.sstep_sweeps = cfg.cv.stem_sstep_sweeps;
    section.window = None;
    let stem = section.build(k, cfg.model.lambda, cfg.seed)?;
    let chain = ChainConfig {
        iterations: cfg.cv.chain_iterations,
        burnin_fraction: cfg.cv.chain_burnin_fraction,
        thin: cfg.cv.chain_thin,
        seed: cfg.seed,
    };
    out.json("cv_plan.json", &plan)?;
    let res = cv_lambda(&ds, &prior, k, &plan, &stem, &chain)?;
    out.with("cv_cells.csv", |w| res.write_cells_csv(w))?;
    out.with("cv_curve.csv", |w| res.write_curve_csv(w))?;
    let failed = res.cells.iter().filter(|c| c.error.is_some()).count();
    out.json(
        "cv_result.json",
        &json!({ "lambda_opt": res.lambda_opt, "folds": plan.fold_count(), "grid_size": plan.grid.len(),
                 "cells": res.cells.len(), "failed_cells": failed }),
    )?;
    println!("lambda_opt = {} ({} cells, {failed} failed)", res.lambda_opt, res.cells.len());
    Ok(())
}

pub fn predict(cfg: &RunConfig, out: &Out) -> Result<()> {
    let p = &cfg.predict;
    let dir = p.fit_dir.as_ref().ok_or_else(|| anyhow!("predict.fit_dir is required"))?;
    let subject = p.subject.as_ref().ok_or_else(|| anyhow!("predict.subject is required"))?;
    ensure!(!p.times.is_empty(), "predict.times is empty");
    ensure!(p.interval_level > 0.0 && p.interval_level < 1.0, "predict.interval_level must lie in (0, 1)");
    let read = |name: &str| -> Result<String> {
        std::fs::read_to_string(dir.join(name)).with_context(|| format!("missing fit artifact {name} in {}", dir.display()))
    };
    let record: FitRecord = serde_json::from_str(&read(FIT_RECORD)?)?;
    let draws: Vec<LatentState> = serde_json::from_str(&read(FIT_DRAWS)?)?;
    let ds = Dataset::read_long(read(FIT_DATA)?.as_bytes())?;
    let hp = MogpHyperparams::from_record(&record.hyperparameters)?;
    let i = ds.subject_index(subject).ok_or_else(|| anyhow!("unknown subject {subject}"))?;
    let times = TimeGrid::new(p.times.iter().map(|t| t / record.time_scale).collect())
        .context("prediction times must be finite and strictly increasing")?;
    let pred = posterior_predictive(&ds, i, &times, &draws, &hp, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let s = pred.summarize(p.interval_level);
    let mut w = csv::Writer::from_writer(out.create("predictive.csv")?);
    w.write_record(["subject_id", "biomarker_id", "time", "median", "lower", "upper", "mean"])?;
    for (g, b) in ds.biomarkers.iter().enumerate() {
        for (j, t) in p.times.iter().enumerate() {
            w.write_record([
                subject.clone(),
                b.clone(),
                t.to_string(),
                s.median[(g, j)].to_string(),
                s.lower[(g, j)].to_string(),
                s.upper[(g, j)].to_string(),
                s.mean[(g, j)].to_string(),
            ])?;
        }
    }
    w.flush()?;
    println!("predicted {} biomarkers at {} times for {subject} from {} draws", ds.p(), p.times.len(), draws.len());
    Ok(())
}

pub fn align(cfg: &RunConfig, out: &Out) -> Result<()> {
    let a = &cfg.align;
    let (Some(est), Some(reference)) = (&a.estimate, &a.reference) else {
        bail!("align.estimate and align.reference are required");
    };
    let read = |p: &PathBuf| -> Result<DMatrix<f64>> {
        read_matrix_csv(File::open(p).with_context(|| format!("opening {}", p.display()))?)
            .with_context(|| format!("reading {}", p.display()))
    };
    let (e, r) = (read(est)?, read(reference)?);
    let al = match a.kind {
        AlignKind::Loadings => align_to_reference(&e, &r)?,
        AlignKind::Correlation => align_correlation(&e, &r)?,
    };
    out.with("aligned.csv", |w| write_matrix_csv(&al.aligned, w))?;
    let perm: Vec<usize> = al.sp.perm().iter().map(|p| p + 1).collect();
    out.json("alignment.json", &json!({ "kind": a.kind, "permutation": perm, "signs": al.sp.signs(), "mad": al.mad }))?;
    println!("aligned with permutation {perm:?}, signs {:?}; MAD {:.4}", al.sp.signs(), al.mad);
    Ok(())
}
