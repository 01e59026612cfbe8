//! Data preparation: age regression-out, coarsening irregular visit times
//! onto a reference grid, the ICC check of that coarsening, and time
//! standardization.

use std::collections::HashMap;
use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Dataset;

/// Read `subject_id,age` records.
pub fn read_ages<R: Read>(reader: R) -> Result<HashMap<String, f64>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Data(format!("missing column {name}")))
    };
    let (ci, ca) = (col("subject_id")?, col("age")?);
    let mut ages = HashMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let age: f64 = rec
            .get(ca)
            .unwrap_or("")
            .parse()
            .map_err(|e| Error::Data(format!("row {}: {e}", line + 2)))?;
        if !age.is_finite() {
            return Err(Error::Data(format!("row {}: non-finite age", line + 2)));
        }
        ages.insert(rec.get(ci).unwrap_or("").to_string(), age);
    }
    Ok(ages)
}

/// Per biomarker, least-squares fit of every measurement on subject age;
/// returns the residuals.
pub fn regress_out_age(ds: &Dataset, ages: &HashMap<String, f64>) -> Result<Dataset> {
    let age: Vec<f64> = ds
        .subjects
        .iter()
        .map(|s| ages.get(&s.id).copied().ok_or_else(|| Error::Data(format!("no age for subject {}", s.id))))
        .collect::<Result<_>>()?;
    let n_obs = ds.total_observations() as f64;
    let mean_age = ds.subjects.iter().zip(&age).map(|(s, a)| a * s.q() as f64).sum::<f64>() / n_obs;
    let sxx: f64 = ds.subjects.iter().zip(&age).map(|(s, a)| s.q() as f64 * (a - mean_age).powi(2)).sum();
    let scale = ds.subjects.iter().zip(&age).map(|(s, a)| s.q() as f64 * a * a).sum::<f64>();
    if !(sxx > 1e-12 * scale.max(f64::MIN_POSITIVE)) {
        return Err(Error::InvalidArgument("age is constant over all measurements".into()));
    }
    let p = ds.p();
    let mut mean_x = vec![0.0; p];
    let mut sxy = vec![0.0; p];
    for (s, a) in ds.subjects.iter().zip(&age) {
        for g in 0..p {
            let row_sum = s.x.row(g).sum();
            mean_x[g] += row_sum;
            sxy[g] += (a - mean_age) * row_sum;
        }
    }
    let slope: Vec<f64> = sxy.iter().map(|v| v / sxx).collect();
    let mean_x: Vec<f64> = mean_x.iter().map(|v| v / n_obs).collect();
    let subjects = ds
        .subjects
        .iter()
        .zip(&age)
        .map(|(s, a)| {
            let x = DMatrix::from_fn(p, s.q(), |g, j| s.x[(g, j)] - mean_x[g] - slope[g] * (a - mean_age));
            (s.id.clone(), s.times.as_slice().to_vec(), x)
        })
        .collect();
    Dataset::new(ds.biomarkers.clone(), subjects)
}

/// Nearest reference time; equidistant ties go to the earlier one.
fn snap(t: f64, reference: &[f64]) -> f64 {
    let mut best = reference[0];
    for &r in &reference[1..] {
        if (r - t).abs() < (best - t).abs() {
            best = r;
        }
    }
    best
}

/// One subject's times mapped onto a reference grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMapping {
    pub original: Vec<f64>,
    /// Mapped time of every original observation; equal neighbours were merged.
    pub mapped: Vec<f64>,
}

impl GridMapping {
    /// Distinct mapped times with the original indices that landed on each.
    pub fn slots(&self) -> Vec<(f64, Vec<usize>)> {
        let mut out: Vec<(f64, Vec<usize>)> = Vec::new();
        for (j, &t) in self.mapped.iter().enumerate() {
            match out.last_mut() {
                Some((last, idx)) if *last == t => idx.push(j),
                _ => out.push((t, vec![j])),
            }
        }
        out
    }

    pub fn has_merges(&self) -> bool {
        self.slots().len() < self.mapped.len()
    }
}

/// Snap the first time to the reference grid, then carry each later time
/// forward by its original gap from the previous one and snap again.
/// Observations landing on an already used slot are merged into it.
pub fn map_to_reference_grid(times: &[f64], reference: &[f64]) -> Result<GridMapping> {
    if reference.is_empty() || reference.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidArgument("reference times must be non-empty, sorted and distinct".into()));
    }
    if times.is_empty() || times.windows(2).any(|w| !(w[0] < w[1])) || times.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidArgument("subject times must be non-empty and strictly increasing".into()));
    }
    let mut mapped = Vec::with_capacity(times.len());
    mapped.push(snap(times[0], reference));
    for j in 1..times.len() {
        let carried = mapped[j - 1] + (times[j] - times[j - 1]);
        mapped.push(snap(carried, reference));
    }
    Ok(GridMapping { original: times.to_vec(), mapped })
}

/// One row of the mapping audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingRecord {
    pub subject: String,
    pub original_time: f64,
    pub mapped_time: f64,
    pub merged: bool,
}

pub fn write_mapping_csv<W: Write>(records: &[MappingRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["subject_id", "original_time", "mapped_time", "merged"])?;
    for r in records {
        w.write_record([r.subject.clone(), r.original_time.to_string(), r.mapped_time.to_string(), r.merged.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Map every subject onto `reference`; merged observations are averaged.
pub fn map_dataset(ds: &Dataset, reference: &[f64]) -> Result<(Dataset, Vec<GridMapping>, Vec<MappingRecord>)> {
    let mut subjects = Vec::with_capacity(ds.n());
    let mut mappings = Vec::with_capacity(ds.n());
    let mut records = Vec::new();
    for s in &ds.subjects {
        let m = map_to_reference_grid(s.times.as_slice(), reference)?;
        let slots = m.slots();
        let mut x = DMatrix::zeros(ds.p(), slots.len());
        for (c, (_, idx)) in slots.iter().enumerate() {
            for &j in idx {
                x.column_mut(c).axpy(1.0 / idx.len() as f64, &s.x.column(j), 1.0);
            }
            for &j in idx {
                records.push(MappingRecord {
                    subject: s.id.clone(),
                    original_time: m.original[j],
                    mapped_time: m.mapped[j],
                    merged: idx.len() > 1,
                });
            }
        }
        subjects.push((s.id.clone(), slots.iter().map(|s| s.0).collect(), x));
        mappings.push(m);
    }
    Ok((Dataset::new(ds.biomarkers.clone(), subjects)?, mappings, records))
}

/// One-way random-effects ICC of adjacent-time distances. Each class is one
/// (subject, gap) pair holding its distance before and after mapping, so the
/// value measures how well mapping preserves distances. Subjects with fewer
/// than two observations are skipped.
pub fn icc_distance_diagnostic(before: &[Vec<f64>], after: &[Vec<f64>]) -> Result<f64> {
    if before.len() != after.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {} subjects", before.len(), after.len())));
    }
    let mut pairs: Vec<(f64, f64)> = Vec::new();
    for (i, (b, a)) in before.iter().zip(after).enumerate() {
        if b.len() != a.len() {
            return Err(Error::DimensionMismatch(format!("subject {i}: {} vs {} times", b.len(), a.len())));
        }
        for j in 1..b.len() {
            pairs.push((b[j] - b[j - 1], a[j] - a[j - 1]));
        }
    }
    if pairs.len() < 2 {
        return Err(Error::InvalidArgument("fewer than two adjacent-time distances".into()));
    }
    let m = pairs.len() as f64;
    let grand = pairs.iter().map(|(x, y)| x + y).sum::<f64>() / (2.0 * m);
    let ssb: f64 = pairs.iter().map(|(x, y)| 2.0 * (0.5 * (x + y) - grand).powi(2)).sum();
    let ssw: f64 = pairs.iter().map(|(x, y)| 0.5 * (x - y).powi(2)).sum();
    let msb = ssb / (m - 1.0);
    let msw = ssw / m;
    if msw == 0.0 {
        return Ok(1.0);
    }
    Ok((msb - msw) / (msb + msw))
}

/// Divide every time by the largest observed time. Returns the scale so
/// reports can convert back with [`unstandardize_times`].
pub fn standardize_times(ds: &Dataset) -> Result<(Dataset, f64)> {
    let grid = ds.grid.as_slice();
    let (lo, hi) = (grid[0], grid[grid.len() - 1]);
    if !(hi > 0.0) || lo < 0.0 {
        return Err(Error::InvalidArgument(format!("times must lie in [0, max] with max > 0, got [{lo}, {hi}]")));
    }
    Ok((map_times(ds, |t| t / hi)?, hi))
}

/// Original time of a standardized time `s`. Division by `scale` is not
/// injective, so among the floats near `s * scale` that divide back to `s`
/// this picks the one with the shortest decimal form, then the nearest.
pub fn unscale_time(s: f64, scale: f64) -> f64 {
    let product = s * scale;
    let mut candidates = vec![product];
    let (mut down, mut up) = (product, product);
    for _ in 0..4 {
        down = down.next_down();
        up = up.next_up();
        candidates.extend([down, up]);
    }
    candidates
        .into_iter()
        .filter(|c| c / scale == s)
        .min_by(|a, b| {
            let len = |v: &f64| v.to_string().len();
            len(a).cmp(&len(b)).then((a - product).abs().total_cmp(&(b - product).abs()))
        })
        .unwrap_or(product)
}

/// Undo [`standardize_times`].
pub fn unstandardize_times(ds: &Dataset, scale: f64) -> Result<Dataset> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("time scale {scale} must be positive")));
    }
    map_times(ds, |t| unscale_time(t, scale))
}

/// Multiply every time by `factor`.
pub fn rescale_times(ds: &Dataset, factor: f64) -> Result<Dataset> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::InvalidArgument(format!("time factor {factor} must be positive")));
    }
    map_times(ds, |t| t * factor)
}

fn map_times(ds: &Dataset, f: impl Fn(f64) -> f64) -> Result<Dataset> {
    let subjects = ds
        .subjects
        .iter()
        .map(|s| (s.id.clone(), s.times.as_slice().iter().map(|&t| f(t)).collect(), s.x.clone()))
        .collect();
    Dataset::new(ds.biomarkers.clone(), subjects)
}
