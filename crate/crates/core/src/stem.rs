//! Stochastic EM for the GP hyperparameters: each iteration draws one latent
//! state by Gibbs sampling (S-step) and maximizes the roughness-penalized
//! Gaussian log-likelihood of that draw's augmented factor scores (M-step).

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gibbs::{self, GibbsSampler};
use crate::kernel::{self, MogpHyperparams, TimeGrid};
use crate::linalg::{self, LN_2PI};
use crate::model::{vec_factor_major, Dataset, LatentState, PriorConfig};
use crate::optim::{self, BfgsOptions};

/// Natural-space lower bound for kernel precisions, amplitudes and `ψ²`.
pub const POSITIVITY_FLOOR: f64 = 1e-6;

/// Default roughness penalty weight when no tuning is done.
pub const DEFAULT_LAMBDA: f64 = 3.0;

/// Sufficient statistics of a set of score samples for the Gaussian likelihood.
#[derive(Debug, Clone)]
pub struct ScoreStats {
    n: usize,
    k: usize,
    /// `Σ_i y_i y_iᵀ`.
    outer: DMatrix<f64>,
    /// `Σ_i y_i`.
    sum: DVector<f64>,
}

impl ScoreStats {
    /// Each sample is a `k × q` matrix of scores on the same grid.
    pub fn new(y_samples: &[DMatrix<f64>], k: usize, q: usize) -> Result<Self> {
        if y_samples.is_empty() {
            return Err(Error::InvalidArgument("no score samples".into()));
        }
        let mut outer = DMatrix::zeros(k * q, k * q);
        let mut sum = DVector::zeros(k * q);
        for y in y_samples {
            if y.shape() != (k, q) {
                return Err(Error::DimensionMismatch(format!(
                    "score sample is {}x{}, expected {k}x{q}",
                    y.nrows(),
                    y.ncols()
                )));
            }
            let v = vec_factor_major(y);
            outer.ger(1.0, &v, &v, 1.0);
            sum += v;
        }
        Ok(Self { n: y_samples.len(), k, outer, sum })
    }

    /// `Σ_i (y_i − c)(y_i − c)ᵀ`.
    fn scatter(&self, c: &DVector<f64>) -> DMatrix<f64> {
        let mut s = self.outer.clone();
        s.ger(-1.0, &self.sum, c, 1.0);
        s.ger(-1.0, c, &self.sum, 1.0);
        s.ger(self.n as f64, c, c, 1.0);
        s
    }
}

/// Penalized objective and its gradient with respect to the natural
/// parameters in record order (`v0, v1, B0, B1, ψ², c`).
pub fn penalized_gradient(
    y_samples: &[DMatrix<f64>],
    grid: &TimeGrid,
    hp: &MogpHyperparams,
    lambda: f64,
) -> Result<(f64, Vec<f64>)> {
    let stats = ScoreStats::new(y_samples, hp.k(), grid.len())?;
    objective_and_gradient(&stats, grid.as_slice(), hp, lambda)?
        .ok_or_else(|| Error::NotPositiveDefinite("factor-score prior covariance".into()))
}

/// `None` when the covariance is not positive definite.
fn objective_and_gradient(
    stats: &ScoreStats,
    times: &[f64],
    hp: &MogpHyperparams,
    lambda: f64,
) -> Result<Option<(f64, Vec<f64>)>> {
    let k = hp.k();
    let q = times.len();
    let kq = k * q;
    if stats.k != k || stats.sum.len() != kq {
        return Err(Error::DimensionMismatch("score statistics do not match hyperparameters".into()));
    }
    let sigma = kernel::prior_correlation(hp, times)?;
    let Ok(chol) = linalg::cholesky(&sigma, "") else {
        return Ok(None);
    };
    let n = stats.n as f64;
    let c = crate::model::mean_vector(hp, q);
    let scatter = stats.scatter(&c);
    let mut inv = chol.inverse();
    linalg::symmetrize(&mut inv);
    let inv_s = &inv * &scatter;
    let value = -0.5 * n * (kq as f64 * LN_2PI + linalg::log_det(&chol)) - 0.5 * inv_s.trace() - lambda * hp.roughness();

    // dℓ = ½ tr(W dΣ)
    let w = &inv_s * &inv - n * &inv;
    let sqrt_pi = PI.sqrt();
    let amp0: Vec<f64> = (0..k).map(|a| hp.v0[a] * hp.v0[a] * sqrt_pi / hp.b0[a]).collect();
    let amp1: Vec<f64> = (0..k).map(|a| hp.v1[a] * hp.v1[a] * sqrt_pi / hp.b1[a]).collect();
    let var: Vec<f64> = (0..k).map(|a| amp0[a] + amp1[a] + hp.psi2).collect();

    let mut g_v0 = vec![0.0; k];
    let mut g_v1 = vec![0.0; k];
    let mut g_b0 = vec![0.0; k];
    let mut g_b1 = vec![0.0; k];
    let mut g_psi2 = 0.0;

    for a in 0..k {
        // within-factor block, weight ½ W̃
        let scale = 0.5 / var[a];
        let (b0, b1) = (hp.b0[a], hp.b1[a]);
        for j in 0..q {
            for l in 0..q {
                let wt = scale * w[(a * q + j, a * q + l)];
                let dt2 = (times[j] - times[l]).powi(2);
                let e0 = amp0[a] * (-0.25 * b0 * b0 * dt2).exp();
                let e1 = amp1[a] * (-0.25 * b1 * b1 * dt2).exp();
                let u0 = 2.0 * hp.v0[a] * sqrt_pi / b0 * (-0.25 * b0 * b0 * dt2).exp();
                let u1 = 2.0 * hp.v1[a] * sqrt_pi / b1 * (-0.25 * b1 * b1 * dt2).exp();
                g_v0[a] += wt * u0;
                g_v1[a] += wt * u1;
                g_b0[a] += wt * e0 * (-1.0 / b0 - 0.5 * b0 * dt2);
                g_b1[a] += wt * e1 * (-1.0 / b1 - 0.5 * b1 * dt2);
                if j == l {
                    g_psi2 += wt;
                }
            }
        }
        for b in (a + 1)..k {
            // both mirrored blocks
            let scale = 1.0 / (var[a] * var[b]).sqrt();
            let (ba, bb) = (hp.b0[a], hp.b0[b]);
            let s = ba * ba + bb * bb;
            let pref = (2.0 * PI).sqrt() / s.sqrt();
            for j in 0..q {
                for l in 0..q {
                    let wt = scale * w[(a * q + j, b * q + l)];
                    let dt2 = (times[j] - times[l]).powi(2);
                    let e = pref * (-0.5 * ba * ba * bb * bb / s * dt2).exp();
                    let kab = hp.v0[a] * hp.v0[b] * e;
                    g_v0[a] += wt * hp.v0[b] * e;
                    g_v0[b] += wt * hp.v0[a] * e;
                    g_b0[a] += wt * kab * (-ba / s - dt2 * ba * bb.powi(4) / (s * s));
                    g_b0[b] += wt * kab * (-bb / s - dt2 * bb * ba.powi(4) / (s * s));
                }
            }
        }
    }

    // normalization by the factor variances
    let ws = w.component_mul(&sigma);
    for a in 0..k {
        let t: f64 = ws.rows(a * q, q).sum();
        let coef = -0.5 * t / var[a];
        g_v0[a] += coef * 2.0 * hp.v0[a] * sqrt_pi / hp.b0[a];
        g_v1[a] += coef * 2.0 * hp.v1[a] * sqrt_pi / hp.b1[a];
        g_b0[a] += coef * (-amp0[a] / hp.b0[a]);
        g_b1[a] += coef * (-amp1[a] / hp.b1[a]);
        g_psi2 += coef;
        g_b0[a] -= lambda;
        g_b1[a] -= lambda;
    }

    let resid = &inv * (&stats.sum - n * &c);
    let g_c: Vec<f64> = (0..k).map(|a| resid.rows(a * q, q).sum()).collect();

    let mut grad = Vec::with_capacity(5 * k + 1);
    grad.extend(g_v0);
    grad.extend(g_v1);
    grad.extend(g_b0);
    grad.extend(g_b1);
    grad.push(g_psi2);
    grad.extend(g_c);
    Ok(Some((value, grad)))
}

/// Map to the optimizer's unconstrained coordinates: `v0` and `c` as is,
/// `log(x − floor)` for `v1`, `B0`, `B1` and `ψ²`.
fn to_unconstrained(hp: &MogpHyperparams) -> DVector<f64> {
    let k = hp.k();
    let enc = |x: f64| (x.abs() - POSITIVITY_FLOOR).max(1e-12).ln();
    let v = hp.record_values();
    DVector::from_fn(5 * k + 1, |r, _| if r < k || r > 4 * k { v[r] } else { enc(v[r]) })
}

fn from_unconstrained(x: &DVector<f64>, k: usize) -> Result<MogpHyperparams> {
    let v: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(r, &u)| if r < k || r > 4 * k { u } else { POSITIVITY_FLOOR + u.exp() })
        .collect();
    MogpHyperparams::from_record_values(k, &v)
}

/// Rescale amplitudes and `ψ²` jointly so that the factor variances average 1.
/// The normalized covariance, and hence the objective, is unchanged.
pub fn canonical_scale(hp: &MogpHyperparams) -> MogpHyperparams {
    let k = hp.k();
    let sqrt_pi = PI.sqrt();
    let mean_var = (0..k)
        .map(|a| hp.v0[a].powi(2) * sqrt_pi / hp.b0[a] + hp.v1[a].powi(2) * sqrt_pi / hp.b1[a] + hp.psi2)
        .sum::<f64>()
        / k as f64;
    if !(mean_var > 0.0 && mean_var.is_finite()) {
        return hp.clone();
    }
    let s = mean_var.sqrt().recip();
    let mut out = hp.clone();
    out.v0.iter_mut().chain(out.v1.iter_mut()).for_each(|v| *v *= s);
    out.psi2 *= s * s;
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MStepOptions {
    pub max_iterations: usize,
    pub grad_tol: f64,
}

impl Default for MStepOptions {
    fn default() -> Self {
        Self { max_iterations: 500, grad_tol: 1e-5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MStepOutcome {
    pub hp: MogpHyperparams,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Max-norm of the gradient in the optimizer's coordinates at exit.
    pub grad_norm: f64,
}

impl MStepOutcome {
    pub fn ensure_converged(&self) -> Result<()> {
        if self.converged {
            Ok(())
        } else {
            Err(Error::NonConvergence { iterations: self.iterations, grad_norm: self.grad_norm })
        }
    }
}

/// Maximize the penalized objective over `(Θ, C)` starting from `hp_init`.
pub fn m_step(
    y_samples: &[DMatrix<f64>],
    grid: &TimeGrid,
    lambda: f64,
    hp_init: &MogpHyperparams,
) -> Result<MStepOutcome> {
    m_step_with(y_samples, grid, lambda, hp_init, &MStepOptions::default())
}

pub fn m_step_with(
    y_samples: &[DMatrix<f64>],
    grid: &TimeGrid,
    lambda: f64,
    hp_init: &MogpHyperparams,
    opts: &MStepOptions,
) -> Result<MStepOutcome> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("penalty weight {lambda} must be finite and >= 0")));
    }
    hp_init.validate()?;
    let k = hp_init.k();
    let stats = ScoreStats::new(y_samples, k, grid.len())?;
    let times = grid.as_slice();
    let init_value = objective_and_gradient(&stats, times, hp_init, lambda)?.map(|(v, _)| v);

    let objective = |x: &DVector<f64>| -> Result<Option<(f64, DVector<f64>)>> {
        let Ok(hp) = from_unconstrained(x, k) else {
            return Ok(None);
        };
        let Some((value, g)) = objective_and_gradient(&stats, times, &hp, lambda)? else {
            return Ok(None);
        };
        // chain rule: d(floor + e^u)/du = x − floor
        let vals = hp.record_values();
        let grad = DVector::from_fn(g.len(), |r, _| {
            if r < k || r > 4 * k {
                g[r]
            } else {
                g[r] * (vals[r] - POSITIVITY_FLOOR)
            }
        });
        Ok(Some((value, grad)))
    };
    let bfgs = BfgsOptions { max_iterations: opts.max_iterations, grad_tol: opts.grad_tol, ..Default::default() };
    let out = optim::maximize(objective, to_unconstrained(hp_init), &bfgs)?;
    let raw = from_unconstrained(&out.x, k)?;
    let scaled = canonical_scale(&raw);
    // rescaling is exact in theory; keep the raw optimum if rounding breaks definiteness
    let hp = if kernel::prior_correlation(&scaled, times).and_then(|s| linalg::cholesky(&s, "")).is_ok() {
        scaled
    } else {
        raw
    };
    let grad_norm = out.grad_norm();
    if let Some(v0) = init_value {
        // the round trip through the floored coordinates can move the start slightly
        if out.value < v0 {
            return Ok(MStepOutcome {
                hp: hp_init.clone(),
                objective: v0,
                iterations: out.iterations,
                converged: out.converged,
                grad_norm,
            });
        }
    }
    Ok(MStepOutcome { hp, objective: out.value, iterations: out.iterations, converged: out.converged, grad_norm })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StemConfig {
    /// Number of StEM iterations `L`.
    pub iterations: usize,
    /// Fraction of iterations treated as burn-in of the iterate chain.
    pub burnin_fraction: f64,
    /// Number of final iterates averaged; `None` averages every post-burn-in iterate.
    pub window: Option<usize>,
    pub lambda: f64,
    pub seed: u64,
    /// Gibbs sweeps per S-step.
    pub sstep_sweeps: usize,
    /// Burn-in fraction of each S-step chain.
    pub sstep_burnin_fraction: f64,
    pub mstep: MStepOptions,
    /// Gibbs sweeps run under the starting hyperparameters before the first
    /// S-step, so the first M-step sees scores informed by settled loadings.
    pub warmup_sweeps: usize,
    /// Starting hyperparameters; `None` uses [`default_initial_hyperparams`].
    pub init: Option<MogpHyperparams>,
}

impl StemConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            iterations: 200,
            burnin_fraction: 0.5,
            window: None,
            lambda: DEFAULT_LAMBDA,
            seed,
            sstep_sweeps: 2000,
            sstep_burnin_fraction: 0.5,
            mstep: MStepOptions::default(),
            warmup_sweeps: 0,
            init: Some(default_initial_hyperparams(k)),
        }
    }

    pub fn burnin(&self) -> usize {
        (self.iterations as f64 * self.burnin_fraction).floor() as usize
    }

    pub fn window(&self) -> usize {
        self.window.unwrap_or(self.iterations - self.burnin())
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.iterations > 0
            && (0.0..1.0).contains(&self.burnin_fraction)
            && (0.0..1.0).contains(&self.sstep_burnin_fraction)
            && self.sstep_sweeps > 0
            && self.lambda >= 0.0
            && self.lambda.is_finite()
            && self.window() >= 1
            && self.window() <= self.iterations - self.burnin();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid StEM configuration {self:?}")))
        }
    }
}

/// Largest k for which the first M-step tries every shared-amplitude sign pattern.
pub const MAX_SIGN_START_FACTORS: usize = 6;

/// Copies of `hp` with unit shared amplitudes in every sign pattern up to a
/// global flip. A small shared amplitude sits next to the saddle at zero, so a
/// single start often settles on uncorrelated factors.
fn sign_starts(hp: &MogpHyperparams) -> Vec<MogpHyperparams> {
    let k = hp.k();
    if k < 2 || k > MAX_SIGN_START_FACTORS {
        return Vec::new();
    }
    (0..1usize << (k - 1))
        .map(|mask| {
            let mut start = hp.clone();
            for a in 0..k {
                start.v0[a] = if a > 0 && mask >> (a - 1) & 1 == 1 { -1.0 } else { 1.0 };
            }
            start
        })
        .collect()
}

/// Smooth, mildly positively correlated factors with a small nugget.
pub fn default_initial_hyperparams(k: usize) -> MogpHyperparams {
    MogpHyperparams::uniform(k, 0.1, 1.0, 3.0, 3.0, 0.1, 0.0).expect("valid constants")
}

/// One StEM iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StemIterate {
    pub hp: MogpHyperparams,
    pub objective: f64,
    pub mstep_iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StemTrace {
    pub iterates: Vec<StemIterate>,
    pub burnin: usize,
    pub window: usize,
}

impl StemTrace {
    pub fn len(&self) -> usize {
        self.iterates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterates.is_empty()
    }

    /// Element-wise mean of the last `window` iterates.
    pub fn estimate(&self) -> Result<MogpHyperparams> {
        let len = self.iterates.len();
        if self.window == 0 || self.window > len.saturating_sub(self.burnin) {
            return Err(Error::InvalidArgument(format!(
                "cannot average {} iterates from a trace of {len} with burn-in {}",
                self.window, self.burnin
            )));
        }
        let k = self.iterates[0].hp.k();
        let mut acc = vec![0.0; 5 * k + 1];
        for it in &self.iterates[len - self.window..] {
            for (a, v) in acc.iter_mut().zip(it.hp.record_values()) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= self.window as f64);
        MogpHyperparams::from_record_values(k, &acc)
    }

    /// Columnar export: one row per iterate with every hyperparameter.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let k = self.iterates.first().map_or(0, |it| it.hp.k());
        let mut header = vec!["iteration".to_string(), "objective".into()];
        header.extend(MogpHyperparams::record_keys(k));
        header.extend(["mstep_iterations".into(), "converged".into(), "grad_norm".into()]);
        w.write_record(&header)?;
        for (l, it) in self.iterates.iter().enumerate() {
            let mut row = vec![(l + 1).to_string(), it.objective.to_string()];
            row.extend(it.hp.record_values().iter().map(f64::to_string));
            row.extend([it.mstep_iterations.to_string(), it.converged.to_string(), it.grad_norm.to_string()]);
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Everything needed to continue a StEM run bit-identically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StemCheckpoint {
    pub config: StemConfig,
    pub hp: MogpHyperparams,
    pub state: LatentState,
    pub rng: ChaCha8Rng,
    pub trace: Vec<StemIterate>,
}

impl StemCheckpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Debug, Clone)]
pub struct StemResult {
    pub trace: StemTrace,
    pub estimate: MogpHyperparams,
    /// Latent state after the last S-step.
    pub state: LatentState,
}

/// Stepwise StEM driver; holds the trace so a failing iteration leaves it
/// available for inspection.
pub struct StemRunner<'a> {
    ds: &'a Dataset,
    prior: &'a PriorConfig,
    config: StemConfig,
    hp: MogpHyperparams,
    state: LatentState,
    rng: ChaCha8Rng,
    trace: Vec<StemIterate>,
}

impl<'a> StemRunner<'a> {
    pub fn new(ds: &'a Dataset, prior: &'a PriorConfig, config: StemConfig, k: usize) -> Result<Self> {
        config.validate()?;
        prior.validate(ds.p())?;
        let hp = config.init.clone().unwrap_or_else(|| default_initial_hyperparams(k));
        if hp.k() != k {
            return Err(Error::DimensionMismatch(format!("initial hyperparameters have k = {}, expected {k}", hp.k())));
        }
        hp.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let state = gibbs::initial_state(ds, k, prior, &mut rng);
        Ok(Self { ds, prior, config, hp, state, rng, trace: Vec::new() })
    }

    pub fn resume(ds: &'a Dataset, prior: &'a PriorConfig, cp: StemCheckpoint) -> Result<Self> {
        cp.config.validate()?;
        cp.state.validate(ds)?;
        Ok(Self { ds, prior, config: cp.config, hp: cp.hp, state: cp.state, rng: cp.rng, trace: cp.trace })
    }

    pub fn checkpoint(&self) -> StemCheckpoint {
        StemCheckpoint {
            config: self.config.clone(),
            hp: self.hp.clone(),
            state: self.state.clone(),
            rng: self.rng.clone(),
            trace: self.trace.clone(),
        }
    }

    pub fn completed(&self) -> usize {
        self.trace.len()
    }

    pub fn is_done(&self) -> bool {
        self.trace.len() >= self.config.iterations
    }

    pub fn iterates(&self) -> &[StemIterate] {
        &self.trace
    }

    pub fn current(&self) -> &MogpHyperparams {
        &self.hp
    }

    /// One S-step followed by one M-step.
    pub fn step(&mut self) -> Result<()> {
        let l = self.trace.len() + 1;
        self.try_step().map_err(|e| Error::Stem { iteration: l, source: Box::new(e) })
    }

    fn try_step(&mut self) -> Result<()> {
        let sampler = GibbsSampler::new(self.ds, &self.hp, self.prior)?;
        if self.trace.is_empty() {
            for s in 1..=self.config.warmup_sweeps {
                sampler
                    .sweep(&mut self.state, &mut self.rng)
                    .map_err(|e| Error::Sweep { sweep: s, source: Box::new(e) })?;
            }
        }
        let sweeps = self.config.sstep_sweeps;
        let burn = (sweeps as f64 * self.config.sstep_burnin_fraction).floor() as usize;
        let pick = self.rng.random_range(burn + 1..=sweeps);
        let mut chosen = None;
        for s in 1..=sweeps {
            sampler
                .sweep(&mut self.state, &mut self.rng)
                .map_err(|e| Error::Sweep { sweep: s, source: Box::new(e) })?;
            if s == pick {
                chosen = Some(self.state.y_aug.clone());
            }
        }
        let y = chosen.expect("pick lies within the chain");
        let mut out = m_step_with(&y, &self.ds.grid, self.config.lambda, &self.hp, &self.config.mstep)?;
        if self.trace.is_empty() {
            for start in sign_starts(&self.hp) {
                let alt = m_step_with(&y, &self.ds.grid, self.config.lambda, &start, &self.config.mstep)?;
                if alt.objective > out.objective {
                    out = alt;
                }
            }
        }
        self.hp = out.hp.clone();
        self.trace.push(StemIterate {
            hp: out.hp,
            objective: out.objective,
            mstep_iterations: out.iterations,
            converged: out.converged,
            grad_norm: out.grad_norm,
        });
        Ok(())
    }

    pub fn finish(self) -> Result<StemResult> {
        let trace = StemTrace { iterates: self.trace, burnin: self.config.burnin(), window: self.config.window() };
        let estimate = trace.estimate()?;
        Ok(StemResult { trace, estimate, state: self.state })
    }

    /// Run the remaining iterations, calling `on_checkpoint` every `every` iterations.
    pub fn run_with_checkpoints<F>(mut self, every: usize, mut on_checkpoint: F) -> Result<StemResult>
    where
        F: FnMut(&StemCheckpoint) -> Result<()>,
    {
        while !self.is_done() {
            self.step()?;
            if every > 0 && self.completed() % every == 0 && !self.is_done() {
                on_checkpoint(&self.checkpoint())?;
            }
        }
        self.finish()
    }
}

/// Full StEM run: trace plus the averaged estimate.
pub fn run_stem(ds: &Dataset, prior: &PriorConfig, k: usize, config: &StemConfig) -> Result<StemResult> {
    StemRunner::new(ds, prior, config.clone(), k)?.run_with_checkpoints(0, |_| Ok(()))
}

/// Convergence summary of one hyperparameter's trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub name: String,
    pub running_mean: Vec<f64>,
    pub lag1_autocorrelation: f64,
    pub geweke_z: f64,
    pub stationary: bool,
}

/// Minimum number of post-burn-in iterates for [`trace_diagnostics`].
pub const MIN_DIAGNOSTIC_ITERATES: usize = 20;

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn lag1(x: &[f64]) -> f64 {
    if x.iter().all(|v| *v == x[0]) {
        return 0.0;
    }
    let m = mean(x);
    let den: f64 = x.iter().map(|v| (v - m).powi(2)).sum();
    if !(den > 0.0) {
        return 0.0;
    }
    let num: f64 = x.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum();
    num / den
}

/// Variance of the mean of an autocorrelated segment, inflating the iid
/// variance by the AR(1) factor `(1 + r) / (1 − r)`.
fn mean_variance(x: &[f64]) -> f64 {
    let m = mean(x);
    let n = x.len() as f64;
    let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let r = lag1(x).clamp(-0.99, 0.99);
    var / n * (1.0 + r) / (1.0 - r)
}

/// Geweke-style z for a single series: first 10% against last 50%.
pub fn geweke_z(x: &[f64]) -> f64 {
    let n = x.len();
    let a = &x[..(n / 10).max(2)];
    let b = &x[n - (n / 2).max(2)..];
    let diff = mean(a) - mean(b);
    let var = mean_variance(a) + mean_variance(b);
    if var > 0.0 {
        diff / var.sqrt()
    } else if diff.abs() <= 1e-12 * (1.0 + mean(x).abs()) {
        0.0
    } else {
        f64::INFINITY.copysign(diff)
    }
}

/// Running means, lag-1 autocorrelations and stationarity flags of every
/// hyperparameter over the post-burn-in iterates.
pub fn trace_diagnostics(trace: &StemTrace) -> Result<Vec<TraceSummary>> {
    let post = trace.iterates.get(trace.burnin..).unwrap_or(&[]);
    if post.len() < MIN_DIAGNOSTIC_ITERATES {
        return Err(Error::InvalidArgument(format!(
            "trace has {} post-burn-in iterates, diagnostics need at least {MIN_DIAGNOSTIC_ITERATES}",
            post.len()
        )));
    }
    let k = post[0].hp.k();
    let values: Vec<Vec<f64>> = post.iter().map(|it| it.hp.record_values()).collect();
    Ok(MogpHyperparams::record_keys(k)
        .into_iter()
        .enumerate()
        .map(|(r, name)| {
            let series: Vec<f64> = values.iter().map(|v| v[r]).collect();
            let mut acc = 0.0;
            let running_mean = series
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    acc += v;
                    acc / (i + 1) as f64
                })
                .collect();
            let z = geweke_z(&series);
            TraceSummary { name, running_mean, lag1_autocorrelation: lag1(&series), geweke_z: z, stationary: z.abs() < 2.0 }
        })
        .collect())
}
