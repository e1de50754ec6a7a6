//! Side-by-side joins of per-slice metrics from several runs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::metrics::MetricsTable;
use super::METRICS_FILE;
use crate::data::fmt_float;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NamedRun {
    pub name: String,
    pub table: MetricsTable,
}

/// Reads `<dir>/metrics.csv`; the run is named after the directory.
pub fn load_run(dir: &Path) -> Result<NamedRun> {
    let path = dir.join(METRICS_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::InvalidArgument(format!("cannot read {}: {e}", path.display())))?;
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(NamedRun {
        name,
        table: MetricsTable::parse(&text)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub runs: Vec<NamedRun>,
    pub slices: Vec<usize>,
}

/// Joins runs on their slice column. All runs must cover the same slices.
pub fn compare_runs(runs: Vec<NamedRun>) -> Result<Comparison> {
    let first = runs
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to compare".into()))?;
    let slices: Vec<usize> = first.table.rows.iter().map(|(s, _)| *s).collect();
    if slices.is_empty() {
        return Err(Error::Alignment(format!(
            "run {} has no slices",
            first.name
        )));
    }
    for r in &runs[1..] {
        let other: Vec<usize> = r.table.rows.iter().map(|(s, _)| *s).collect();
        if other != slices {
            return Err(Error::Alignment(format!(
                "run {} covers {} slices, run {} covers {}",
                first.name,
                slices.len(),
                r.name,
                other.len()
            )));
        }
    }
    Ok(Comparison { runs, slices })
}

impl Comparison {
    /// Per-slice `metric(a) - metric(b)`.
    pub fn gap(&self, a: usize, b: usize, metric: &str) -> Result<Vec<f64>> {
        let col = |i: usize| {
            self.runs[i].table.column(metric).ok_or_else(|| {
                Error::Alignment(format!("run {} has no column {metric}", self.runs[i].name))
            })
        };
        let (x, y) = (col(a)?, col(b)?);
        Ok(x.iter().zip(&y).map(|(u, v)| u - v).collect())
    }

    /// Long format: `run,slice,metric,value`.
    pub fn long_csv(&self) -> String {
        let mut out = String::from("run,slice,metric,value\n");
        for run in &self.runs {
            for (slice, values) in &run.table.rows {
                for (col, v) in run.table.columns.iter().zip(values) {
                    let _ = writeln!(out, "{},{},{},{}", run.name, slice, col, fmt_float(*v));
                }
            }
        }
        out
    }

    /// Final-slice table, with reward gaps against the first run.
    pub fn summary(&self) -> String {
        let last = self.slices.len() - 1;
        let mut out = String::new();
        let _ = writeln!(out, "final slice: {}", self.slices[last]);
        let _ = writeln!(
            out,
            "{:<20} {:>12} {:>12} {:>12} {:>12} {:>14}",
            "run", "avg_reward", "cum_reward", "avg_cost", "avg_quality", "reward_gap"
        );
        let base = self.runs[0].table.column("avg_reward").unwrap_or_default();
        for run in &self.runs {
            let get = |m: &str| run.table.column(m).map_or(f64::NAN, |c| c[last]);
            let reward = get("avg_reward");
            let _ = writeln!(
                out,
                "{:<20} {:>12.6} {:>12.4} {:>12.6} {:>12.6} {:>+14.6}",
                run.name,
                reward,
                get("cum_reward"),
                get("avg_cost"),
                get("avg_quality"),
                reward - base.get(last).copied().unwrap_or(f64::NAN)
            );
        }
        let _ = writeln!(
            out,
            "note: slice {} is affected by the warm-start initialization",
            self.slices[0]
        );
        out
    }
}
