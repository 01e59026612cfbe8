//! Plot-ready tables of fitted quantities.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gibbs::{quantile_sorted, ChainConfig, ChainSamples};
use crate::model::{Dataset, LatentState};
use crate::preprocess::unscale_time;

/// Sweep number of the `d`-th stored draw.
pub fn draw_sweep(config: &ChainConfig, d: usize) -> usize {
    config.burnin() + (d + 1) * config.thin
}

/// Scalar parameters of one draw as `(name, value)` pairs.
pub fn draw_scalars(st: &LatentState, biomarkers: &[String]) -> Vec<(String, f64)> {
    let k = st.k();
    let mut out = Vec::new();
    for a in 0..k {
        out.push((format!("pi[{}]", a + 1), st.pi[a]));
        out.push((format!("rho2[{}]", a + 1), st.rho2[a]));
    }
    for (g, b) in biomarkers.iter().enumerate() {
        out.push((format!("sigma2[{b}]"), st.sigma2[g]));
        out.push((format!("phi2[{b}]"), st.phi2[g]));
    }
    let l = st.loadings();
    for (g, b) in biomarkers.iter().enumerate() {
        for a in 0..k {
            out.push((format!("loading[{b},{}]", a + 1), l[(g, a)]));
        }
    }
    out
}

/// Columns `chain,draw,sweep,parameter,value`: one row per stored draw per
/// scalar parameter, including the complete-data log density.
pub fn write_chain_samples_csv<W: Write>(chains: &[ChainSamples], biomarkers: &[String], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["chain", "draw", "sweep", "parameter", "value"])?;
    for (c, ch) in chains.iter().enumerate() {
        for (d, st) in ch.draws.iter().enumerate() {
            let head = [(c + 1).to_string(), (d + 1).to_string(), draw_sweep(&ch.config, d).to_string()];
            for (name, v) in draw_scalars(st, biomarkers) {
                w.write_record([&head[0], &head[1], &head[2], &name, &v.to_string()])?;
            }
            w.write_record([&head[0], &head[1], &head[2], "log_joint", &ch.log_joint[d].to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainMetadata {
    pub chain: usize,
    pub seed: u64,
    pub iterations: usize,
    pub burnin: usize,
    pub thin: usize,
    pub stored_draws: usize,
}

pub fn chain_metadata(chains: &[ChainSamples]) -> Vec<ChainMetadata> {
    chains
        .iter()
        .enumerate()
        .map(|(c, ch)| ChainMetadata {
            chain: c + 1,
            seed: ch.config.seed,
            iterations: ch.config.iterations,
            burnin: ch.config.burnin(),
            thin: ch.config.thin,
            stored_draws: ch.len(),
        })
        .collect()
}

/// Columns `subject_id,chain,draw,factor,time,value`: every stored factor
/// trajectory on the global grid. `time_scale` converts standardized times
/// back to reporting units.
pub fn write_trajectory_draws_csv<W: Write>(
    ds: &Dataset,
    chains: &[ChainSamples],
    time_scale: f64,
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["subject_id", "chain", "draw", "factor", "time", "value"])?;
    let times: Vec<String> = ds.grid.as_slice().iter().map(|&t| unscale_time(t, time_scale).to_string()).collect();
    for (i, s) in ds.subjects.iter().enumerate() {
        for (c, ch) in chains.iter().enumerate() {
            for (d, st) in ch.draws.iter().enumerate() {
                let y = &st.y_aug[i];
                for a in 0..y.nrows() {
                    for (j, t) in times.iter().enumerate() {
                        w.write_record([
                            s.id.clone(),
                            (c + 1).to_string(),
                            (d + 1).to_string(),
                            (a + 1).to_string(),
                            t.clone(),
                            y[(a, j)].to_string(),
                        ])?;
                    }
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Posterior summary of one loading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadingSummary {
    pub biomarker: String,
    pub factor: usize,
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
    /// Fraction of draws with the loading switched on.
    pub inclusion: f64,
}

impl LoadingSummary {
    /// `median -0.25, CI (-0.33, -0.17)`.
    pub fn display(&self) -> String {
        format!("median {:.2}, CI ({:.2}, {:.2})", self.median, self.lower, self.upper)
    }
}

/// Median and central `level` interval of every loading over `draws`.
pub fn loading_table(draws: &[LatentState], biomarkers: &[String], level: f64) -> Result<Vec<LoadingSummary>> {
    let first = draws.first().ok_or_else(|| Error::InvalidArgument("no draws to summarize".into()))?;
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("interval level {level} must lie in (0, 1)")));
    }
    let k = first.k();
    let loadings: Vec<DMatrix<f64>> = draws.iter().map(LatentState::loadings).collect();
    let tail = 0.5 * (1.0 - level);
    let mut out = Vec::with_capacity(biomarkers.len() * k);
    for (g, b) in biomarkers.iter().enumerate() {
        for a in 0..k {
            let mut v: Vec<f64> = loadings.iter().map(|l| l[(g, a)]).collect();
            v.sort_by(f64::total_cmp);
            let on = draws.iter().filter(|st| st.z[(g, a)] == 1).count();
            out.push(LoadingSummary {
                biomarker: b.clone(),
                factor: a + 1,
                median: quantile_sorted(&v, 0.5),
                lower: quantile_sorted(&v, tail),
                upper: quantile_sorted(&v, 1.0 - tail),
                inclusion: on as f64 / draws.len() as f64,
            });
        }
    }
    Ok(out)
}

/// Columns `biomarker_id,factor,median,lower,upper,inclusion,summary`.
pub fn write_loading_table_csv<W: Write>(rows: &[LoadingSummary], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["biomarker_id", "factor", "median", "lower", "upper", "inclusion", "summary"])?;
    for r in rows {
        w.write_record([
            r.biomarker.clone(),
            r.factor.to_string(),
            r.median.to_string(),
            r.lower.to_string(),
            r.upper.to_string(),
            r.inclusion.to_string(),
            r.display(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Square matrix with one-based `row` and column headers `1..k`.
pub fn write_matrix_csv<W: Write>(m: &DMatrix<f64>, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["row".to_string()];
    header.extend((1..=m.ncols()).map(|c| c.to_string()));
    w.write_record(&header)?;
    for r in 0..m.nrows() {
        let mut rec = vec![(r + 1).to_string()];
        rec.extend(m.row(r).iter().map(|v| (v + 0.0).to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_csv<R: std::io::Read>(reader: R) -> Result<DMatrix<f64>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .skip(1)
            .map(|s| s.parse::<f64>().map_err(|e| Error::Data(format!("matrix entry {s:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    if nr == 0 || rows.iter().any(|r| r.len() != nc) {
        return Err(Error::Data("matrix file is empty or ragged".into()));
    }
    Ok(DMatrix::from_fn(nr, nc, |r, c| rows[r][c]))
}

/// One replicate of a recovery experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRow {
    pub n: usize,
    pub replicate: usize,
    pub mad: f64,
    pub seconds: f64,
}

/// Columns `n,replicate,mad,seconds`.
pub fn write_recovery_csv<W: Write>(rows: &[RecoveryRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["n", "replicate", "mad", "seconds"])?;
    for r in rows {
        w.write_record([r.n.to_string(), r.replicate.to_string(), r.mad.to_string(), r.seconds.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
