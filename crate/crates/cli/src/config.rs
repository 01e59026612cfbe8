//! Run configuration read from TOML. Every field has a default so a config
//! file only names what differs; the fully resolved value is echoed into the
//! output directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use mogp_dfa::gibbs::ChainConfig;
use mogp_dfa::simulate::{default_correlation, SimConfig};
use mogp_dfa::stem::{MStepOptions, StemConfig};
use mogp_dfa::{Dataset, PriorConfig};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: Option<usize>,
    pub out: PathBuf,
    pub data: DataSection,
    pub model: ModelSection,
    pub prior: PriorSection,
    pub stem: StemSection,
    pub gibbs: GibbsSection,
    pub cv: CvSection,
    pub simulate: SimulateSection,
    pub preprocess: PreprocessSection,
    pub predict: PredictSection,
    pub align: AlignSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            threads: None,
            out: PathBuf::from("out"),
            data: DataSection::default(),
            model: ModelSection::default(),
            prior: PriorSection::default(),
            stem: StemSection::default(),
            gibbs: GibbsSection::default(),
            cv: CvSection::default(),
            simulate: SimulateSection::default(),
            preprocess: PreprocessSection::default(),
            predict: PredictSection::default(),
            align: AlignSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Long-format table `subject_id,time,biomarker_id,value`.
    pub path: Option<PathBuf>,
    /// `truth.json` written by `simulate`; enables truth comparisons.
    pub truth: Option<PathBuf>,
    /// Divide times by the largest observed time before fitting.
    pub standardize_times: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { path: None, truth: None, standardize_times: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub k: usize,
    pub lambda: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { k: 2, lambda: mogp_dfa::stem::DEFAULT_LAMBDA }
    }
}

/// Hyperprior constants; `c0` and `d0` default to `0.1 p` and `0.9 p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSection {
    pub c0: Option<f64>,
    pub d0: Option<f64>,
    pub c1: f64,
    pub d1: f64,
    pub c2: f64,
    pub d2: f64,
    pub c3: f64,
    pub d3: f64,
}

impl Default for PriorSection {
    fn default() -> Self {
        Self { c0: None, d0: None, c1: 1.0, d1: 1.0, c2: 1.0, d2: 1.0, c3: 1.0, d3: 1.0 }
    }
}

impl PriorSection {
    pub fn build(&self, ds: &Dataset) -> Result<PriorConfig> {
        let mut prior = PriorConfig::default_for(ds);
        if let Some(c0) = self.c0 {
            prior.c0 = c0;
        }
        if let Some(d0) = self.d0 {
            prior.d0 = d0;
        }
        (prior.c1, prior.d1, prior.c2, prior.d2, prior.c3, prior.d3) =
            (self.c1, self.d1, self.c2, self.d2, self.c3, self.d3);
        prior.validate(ds.p())?;
        Ok(prior)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StemSection {
    pub iterations: usize,
    pub burnin_fraction: f64,
    /// Number of final iterates averaged; default is every post-burn-in iterate.
    pub window: Option<usize>,
    pub sstep_sweeps: usize,
    pub sstep_burnin_fraction: f64,
    pub warmup_sweeps: usize,
    pub mstep_max_iterations: usize,
    pub mstep_grad_tol: f64,
    /// Write `stem_checkpoint.json` every this many iterations; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for StemSection {
    fn default() -> Self {
        let base = StemConfig::new(1, 0);
        Self {
            iterations: base.iterations,
            burnin_fraction: base.burnin_fraction,
            window: None,
            sstep_sweeps: base.sstep_sweeps,
            sstep_burnin_fraction: base.sstep_burnin_fraction,
            warmup_sweeps: base.warmup_sweeps,
            mstep_max_iterations: base.mstep.max_iterations,
            mstep_grad_tol: base.mstep.grad_tol,
            checkpoint_every: 0,
        }
    }
}

impl StemSection {
    pub fn build(&self, k: usize, lambda: f64, seed: u64) -> Result<StemConfig> {
        let mut c = StemConfig::new(k, seed);
        c.iterations = self.iterations;
        c.burnin_fraction = self.burnin_fraction;
        c.window = self.window;
        c.lambda = lambda;
        c.sstep_sweeps = self.sstep_sweeps;
        c.sstep_burnin_fraction = self.sstep_burnin_fraction;
        c.warmup_sweeps = self.warmup_sweeps;
        c.mstep = MStepOptions { max_iterations: self.mstep_max_iterations, grad_tol: self.mstep_grad_tol };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GibbsSection {
    pub chains: usize,
    pub iterations: usize,
    pub burnin_fraction: f64,
    pub thin: usize,
    /// Central credible level of reported intervals.
    pub interval_level: f64,
}

impl Default for GibbsSection {
    fn default() -> Self {
        let base = ChainConfig::default();
        Self {
            chains: 3,
            iterations: base.iterations,
            burnin_fraction: base.burnin_fraction,
            thin: base.thin,
            interval_level: 0.95,
        }
    }
}

impl GibbsSection {
    /// One config per chain; chain `c` uses seed `seed + c`.
    pub fn build(&self, seed: u64) -> Result<Vec<ChainConfig>> {
        ensure!(self.chains >= 1, "gibbs.chains must be at least 1");
        ensure!(
            self.interval_level > 0.0 && self.interval_level < 1.0,
            "gibbs.interval_level must lie in (0, 1)"
        );
        let configs: Vec<ChainConfig> = (0..self.chains as u64)
            .map(|c| ChainConfig {
                iterations: self.iterations,
                burnin_fraction: self.burnin_fraction,
                thin: self.thin,
                seed: seed.wrapping_add(c),
            })
            .collect();
        configs[0].validate()?;
        ensure!(configs[0].stored_draws() >= 1, "gibbs settings store no draws");
        Ok(configs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvSection {
    pub folds: usize,
    /// Penalty values; default is the 17-point grid `exp(-4) .. exp(4)`.
    pub grid: Option<Vec<f64>>,
    pub stem_iterations: usize,
    pub stem_sstep_sweeps: usize,
    pub chain_iterations: usize,
    pub chain_burnin_fraction: f64,
    pub chain_thin: usize,
}

impl Default for CvSection {
    fn default() -> Self {
        Self {
            folds: mogp_dfa::tuning::DEFAULT_FOLDS,
            grid: None,
            stem_iterations: 20,
            stem_sstep_sweeps: 20,
            chain_iterations: 200,
            chain_burnin_fraction: 0.5,
            chain_thin: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub n: usize,
    pub p: usize,
    pub k: usize,
    pub q: usize,
    pub smoothness: f64,
    /// Factor correlation matrix by rows; default pairs factors 1–2 and 3–4 at 0.5.
    pub correlation: Option<Vec<Vec<f64>>>,
    pub sparsity: f64,
    pub loading_mean: f64,
    pub loading_sd: f64,
    pub mu_low: f64,
    pub mu_high: f64,
    pub sigma: f64,
    pub phi: f64,
    pub min_one_loading: bool,
}

impl Default for SimulateSection {
    fn default() -> Self {
        let base = SimConfig::new(100, 100, 4, 0);
        Self {
            n: base.n,
            p: base.p,
            k: base.k,
            q: base.q,
            smoothness: base.smoothness,
            correlation: None,
            sparsity: base.sparsity,
            loading_mean: base.loading_mean,
            loading_sd: base.loading_sd,
            mu_low: base.mu_range.0,
            mu_high: base.mu_range.1,
            sigma: base.sigma,
            phi: base.phi,
            min_one_loading: base.min_one_loading,
        }
    }
}

impl SimulateSection {
    pub fn build(&self, seed: u64) -> Result<SimConfig> {
        let mut c = SimConfig::new(self.n, self.p, self.k, seed);
        c.q = self.q;
        c.smoothness = self.smoothness;
        c.correlation = match &self.correlation {
            None => default_correlation(self.k),
            Some(rows) => {
                let k = rows.len();
                ensure!(rows.iter().all(|r| r.len() == k), "simulate.correlation must be square");
                DMatrix::from_fn(k, k, |a, b| rows[a][b])
            }
        };
        c.sparsity = self.sparsity;
        c.loading_mean = self.loading_mean;
        c.loading_sd = self.loading_sd;
        c.mu_range = (self.mu_low, self.mu_high);
        c.sigma = self.sigma;
        c.phi = self.phi;
        c.min_one_loading = self.min_one_loading;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSection {
    /// Table `subject_id,age`; when present, age is regressed out of every biomarker.
    pub ages: Option<PathBuf>,
    /// Explicit reference times for grid mapping.
    pub reference_grid: Option<Vec<f64>>,
    /// Alternatively, a regular reference grid `0, step, 2 step, ...` up to `reference_end`.
    pub reference_step: Option<f64>,
    pub reference_end: Option<f64>,
}

impl PreprocessSection {
    pub fn reference(&self) -> Result<Option<Vec<f64>>> {
        match (&self.reference_grid, self.reference_step, self.reference_end) {
            (Some(_), Some(_), _) => bail!("give either preprocess.reference_grid or preprocess.reference_step"),
            (Some(g), None, _) => Ok(Some(g.clone())),
            (None, Some(step), Some(end)) => {
                ensure!(step > 0.0 && end >= 0.0, "reference step must be positive and end non-negative");
                let count = (end / step + 1e-9).floor() as usize;
                Ok(Some((0..=count).map(|j| j as f64 * step).collect()))
            }
            (None, Some(_), None) => bail!("preprocess.reference_step needs preprocess.reference_end"),
            (None, None, _) => Ok(None),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictSection {
    /// Output directory of a previous `fit`.
    pub fit_dir: Option<PathBuf>,
    pub subject: Option<String>,
    /// Prediction times in original units.
    pub times: Vec<f64>,
    pub interval_level: f64,
}

impl Default for PredictSection {
    fn default() -> Self {
        Self { fit_dir: None, subject: None, times: Vec::new(), interval_level: 0.95 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignKind {
    Loadings,
    Correlation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignSection {
    pub estimate: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub kind: AlignKind,
}

impl Default for AlignSection {
    fn default() -> Self {
        Self { estimate: None, reference: None, kind: AlignKind::Loadings }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: Self = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        // relative data paths are taken relative to the config file
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut Option<PathBuf>| {
            if let Some(v) = p {
                if v.is_relative() {
                    *v = base.join(&*v);
                }
            }
        };
        rebase(&mut cfg.data.path);
        rebase(&mut cfg.data.truth);
        rebase(&mut cfg.preprocess.ages);
        rebase(&mut cfg.predict.fit_dir);
        rebase(&mut cfg.align.estimate);
        rebase(&mut cfg.align.reference);
        if cfg.out.is_relative() {
            cfg.out = base.join(&cfg.out);
        }
        Ok(cfg)
    }

    /// Validate scalar settings and require that every path the command
    /// reads exists.
    pub fn check(&self, command: &str) -> Result<()> {
        ensure!(self.model.k >= 1, "model.k must be at least 1");
        ensure!(self.model.lambda >= 0.0 && self.model.lambda.is_finite(), "model.lambda must be finite and >= 0");
        let paths: Vec<(&str, &Option<PathBuf>)> = match command {
            "preprocess" => vec![("data.path", &self.data.path), ("preprocess.ages", &self.preprocess.ages)],
            "fit" => vec![("data.path", &self.data.path), ("data.truth", &self.data.truth)],
            "cv" => vec![("data.path", &self.data.path)],
            "predict" => vec![("predict.fit_dir", &self.predict.fit_dir)],
            "align" => vec![("align.estimate", &self.align.estimate), ("align.reference", &self.align.reference)],
            _ => Vec::new(),
        };
        for (name, p) in paths {
            if let Some(p) = p {
                ensure!(p.exists(), "{name} {} does not exist", p.display());
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}
