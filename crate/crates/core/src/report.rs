//! Empirical CDFs, rank correlation, and report emission.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::RoundReport;

/// Ascending `(value, cumulative fraction)` steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CdfSeries {
    pub points: Vec<(f64, f64)>,
}

impl CdfSeries {
    /// Fraction of the sample at or below `x`.
    pub fn at(&self, x: f64) -> f64 {
        let i = self.points.partition_point(|&(v, _)| v <= x);
        if i == 0 {
            0.0
        } else {
            self.points[i - 1].1
        }
    }
}

/// Empirical CDF with one step per distinct value.
pub fn cdf(values: &[f64]) -> Result<CdfSeries> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("NaN in CDF input".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut points: Vec<(f64, f64)> = Vec::new();
    for (i, &v) in sorted.iter().enumerate() {
        let frac = if i + 1 == n { 1.0 } else { (i + 1) as f64 / n as f64 };
        match points.last_mut() {
            Some(last) if last.0 == v => last.1 = frac,
            _ => points.push((v, frac)),
        }
    }
    Ok(CdfSeries { points })
}

/// Tau-b between two paired score lists.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::ElementMismatch);
    }
    let n = x.len();
    let (mut concordant, mut discordant, mut tie_x, mut tie_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i].total_cmp(&x[j]) as i64;
            let dy = y[i].total_cmp(&y[j]) as i64;
            match (dx, dy) {
                (0, 0) => {}
                (0, _) => tie_x += 1,
                (_, 0) => tie_y += 1,
                _ if dx == dy => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let denom = (((concordant + discordant + tie_x) * (concordant + discordant + tie_y)) as f64).sqrt();
    if denom == 0.0 {
        // every pair tied on one side: no ordering information
        return Ok(if n < 2 || x == y { 1.0 } else { 0.0 });
    }
    Ok((concordant - discordant) as f64 / denom)
}

/// Tau-b between two orderings of the same elements (best first).
pub fn kendall_tau<T: Eq + std::hash::Hash>(a: &[T], b: &[T]) -> Result<f64> {
    let sa: HashSet<&T> = a.iter().collect();
    let sb: HashSet<&T> = b.iter().collect();
    if a.len() != b.len() || sa.len() != a.len() || sa != sb {
        return Err(Error::ElementMismatch);
    }
    let rank_b = |e: &T| b.iter().position(|x| x == e).expect("same elements") as f64;
    let ra: Vec<f64> = (0..a.len()).map(|i| i as f64).collect();
    let rb: Vec<f64> = a.iter().map(rank_b).collect();
    kendall_tau_b(&ra, &rb)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

pub const CSV_COLUMNS: [&str; 10] = [
    "do",
    "strategy",
    "budget",
    "seed",
    "acc_before",
    "acc_after",
    "f1_before",
    "f1_after",
    "residual_norm",
    "objective",
];

fn fixed(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Writes `reports` to `path`. JSON keeps full precision; CSV holds one row
/// per report on the primary evaluation set with six-decimal reals.
pub fn emit(reports: &[RoundReport], format: ReportFormat, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    match format {
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut out, reports)?;
            out.write_all(b"\n")?;
        }
        ReportFormat::Csv => {
            let mut w = csv::WriterBuilder::new()
                .terminator(csv::Terminator::Any(b'\n'))
                .from_writer(&mut out);
            w.write_record(CSV_COLUMNS)?;
            for r in reports {
                let (before, after) = (r.before.primary(), r.after.primary());
                w.write_record([
                    r.do_name.clone(),
                    r.strategy.clone(),
                    r.budget.to_string(),
                    r.seed.to_string(),
                    fixed(Some(before.accuracy)),
                    fixed(Some(after.accuracy)),
                    fixed(Some(before.f1)),
                    fixed(Some(after.f1)),
                    fixed(r.residual_norm),
                    fixed(r.objective),
                ])?;
            }
            w.flush()?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Pretty JSON of any serializable value, newline-terminated.
pub fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}
