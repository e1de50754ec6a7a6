//! Per-slice metrics and their CSV encodings.
//!
//! `metrics.csv` columns (slice numbers are 0-based):
//!
//! | column | unit |
//! |---|---|
//! | `slice` | slice index |
//! | `avg_reward` | mean utility reward in [0, 1] |
//! | `cum_reward` | sum of utility rewards over all slices so far |
//! | `avg_cost` | mean raw cost of chosen actions, dataset cost units |
//! | `avg_quality` | mean quality of chosen actions in [0, 1] |
//! | `gate_open_rate` | fraction of decisions with bonus-based selection |
//! | `action_rate_<a>` | fraction of decisions choosing action `a` |
//!
//! `domains.csv` columns: `slice,domain_id,avg_reward,count`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::data::{fmt_float, normalize_cost, Sample};
use crate::error::{Error, Result};
use crate::replay::ReplayRecord;
use crate::reward::{utility_reward, RewardParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainStat {
    pub avg_reward: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceMetrics {
    pub slice_index: usize,
    pub num_samples: usize,
    pub avg_reward: f64,
    pub cum_reward: f64,
    pub avg_cost: f64,
    pub avg_quality: f64,
    pub gate_open_rate: f64,
    pub action_rate: Vec<f64>,
    pub per_domain: BTreeMap<usize, DomainStat>,
}

/// Summarizes one slice. `records[i]` must describe the decision taken on
/// `samples[i]`; `prev_cum_reward` is the cumulative reward before this
/// slice.
pub fn compute_slice_metrics(
    slice_index: usize,
    records: &[ReplayRecord],
    samples: &[Sample],
    cmax: f64,
    reward: &RewardParams,
    prev_cum_reward: f64,
) -> Result<SliceMetrics> {
    if records.len() != samples.len() {
        return Err(Error::Alignment(format!(
            "{} records for {} samples",
            records.len(),
            samples.len()
        )));
    }
    if samples.is_empty() {
        return Err(Error::Alignment("empty slice".into()));
    }
    let k = samples[0].quality.len();
    let n = samples.len() as f64;
    let (mut reward_sum, mut cost_sum, mut quality_sum, mut gate_open) = (0.0, 0.0, 0.0, 0usize);
    let mut counts = vec![0usize; k];
    let mut domains: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (i, (rec, s)) in records.iter().zip(samples).enumerate() {
        if rec.context != s.context {
            return Err(Error::Alignment(format!(
                "record {i} does not match sample {}",
                s.id
            )));
        }
        if rec.action >= k {
            return Err(Error::Alignment(format!(
                "record {i}: action {} outside [0, {k})",
                rec.action
            )));
        }
        let (q, c) = (s.quality[rec.action], s.cost[rec.action]);
        let expected = utility_reward(q, normalize_cost(c, cmax), reward);
        if expected != rec.reward {
            return Err(Error::Alignment(format!(
                "record {i}: stored reward {} but sample gives {expected}",
                rec.reward
            )));
        }
        reward_sum += rec.reward;
        cost_sum += c;
        quality_sum += q;
        gate_open += usize::from(rec.gate_open);
        counts[rec.action] += 1;
        let entry = domains.entry(s.domain_id()).or_default();
        entry.0 += rec.reward;
        entry.1 += 1;
    }
    Ok(SliceMetrics {
        slice_index,
        num_samples: samples.len(),
        avg_reward: reward_sum / n,
        cum_reward: prev_cum_reward + reward_sum,
        avg_cost: cost_sum / n,
        avg_quality: quality_sum / n,
        gate_open_rate: gate_open as f64 / n,
        action_rate: counts.iter().map(|&c| c as f64 / n).collect(),
        per_domain: domains
            .into_iter()
            .map(|(d, (sum, count))| {
                (
                    d,
                    DomainStat {
                        avg_reward: sum / count as f64,
                        count,
                    },
                )
            })
            .collect(),
    })
}

pub const SCALAR_COLUMNS: [&str; 5] = [
    "avg_reward",
    "cum_reward",
    "avg_cost",
    "avg_quality",
    "gate_open_rate",
];

pub fn metrics_csv_header(num_actions: usize) -> String {
    let mut h = String::from("slice");
    for c in SCALAR_COLUMNS {
        h.push(',');
        h.push_str(c);
    }
    for a in 0..num_actions {
        let _ = write!(h, ",action_rate_{a}");
    }
    h
}

pub fn metrics_csv(slices: &[SliceMetrics]) -> String {
    let k = slices.first().map_or(0, |m| m.action_rate.len());
    let mut out = metrics_csv_header(k);
    out.push('\n');
    for m in slices {
        let _ = write!(out, "{}", m.slice_index);
        for v in [
            m.avg_reward,
            m.cum_reward,
            m.avg_cost,
            m.avg_quality,
            m.gate_open_rate,
        ] {
            out.push(',');
            out.push_str(&fmt_float(v));
        }
        for r in &m.action_rate {
            out.push(',');
            out.push_str(&fmt_float(*r));
        }
        out.push('\n');
    }
    out
}

pub fn domains_csv(slices: &[SliceMetrics]) -> String {
    let mut out = String::from("slice,domain_id,avg_reward,count\n");
    for m in slices {
        for (d, stat) in &m.per_domain {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                m.slice_index,
                d,
                fmt_float(stat.avg_reward),
                stat.count
            );
        }
    }
    out
}

/// A parsed `metrics.csv`: column names and one row of values per slice.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub columns: Vec<String>,
    pub rows: Vec<(usize, Vec<f64>)>,
}

impl MetricsTable {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(1, "empty metrics file"))?;
        let mut cols = header.split(',');
        if cols.next() != Some("slice") {
            return Err(Error::parse(1, "first column must be `slice`"));
        }
        let columns: Vec<String> = cols.map(str::to_owned).collect();
        let mut rows = Vec::new();
        for (idx, line) in lines {
            let lineno = idx + 1;
            let mut cells = line.split(',');
            let slice = cells
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::parse(lineno, "invalid slice number"))?;
            let values = cells
                .map(|c| {
                    c.parse::<f64>()
                        .map_err(|_| Error::parse(lineno, format!("invalid value {c:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            if values.len() != columns.len() {
                return Err(Error::parse(
                    lineno,
                    format!("{} values for {} columns", values.len(), columns.len()),
                ));
            }
            rows.push((slice, values));
        }
        Ok(Self { columns, rows })
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|(_, v)| v[i]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RoutingContext;

    fn slice_fixture(actions: &[usize], reward: &RewardParams) -> (Vec<ReplayRecord>, Vec<Sample>) {
        let samples: Vec<Sample> = actions
            .iter()
            .enumerate()
            .map(|(i, _)| Sample {
                id: format!("s{i}"),
                context: RoutingContext::new(vec![i as f64], [0.0; 3], i % 2),
                quality: vec![0.5, 0.25, 1.0],
                cost: vec![0.0, 1.0, 2.0],
            })
            .collect();
        let records = samples
            .iter()
            .zip(actions)
            .map(|(s, &a)| ReplayRecord {
                context: s.context.clone(),
                action: a,
                reward: utility_reward(s.quality[a], normalize_cost(s.cost[a], 2.0), reward),
                gate_label: false,
                gate_open: a == 2,
                slice_index: 0,
            })
            .collect();
        (records, samples)
    }

    #[test]
    fn constant_reward_slice() {
        let reward = RewardParams::default();
        let (records, samples) = slice_fixture(&[0, 0, 0, 0], &reward);
        let m = compute_slice_metrics(0, &records, &samples, 2.0, &reward, 1.5).unwrap();
        assert_eq!(m.avg_reward, 0.5);
        assert_eq!(m.cum_reward, 3.5);
        assert_eq!(m.avg_cost, 0.0);
        assert_eq!(m.action_rate, vec![1.0, 0.0, 0.0]);
        assert_eq!(m.per_domain.len(), 2);
        assert_eq!(m.per_domain[&1].count, 2);
    }

    #[test]
    fn single_sample_indicator() {
        let reward = RewardParams::default();
        let (records, samples) = slice_fixture(&[2], &reward);
        let m = compute_slice_metrics(3, &records, &samples, 2.0, &reward, 0.0).unwrap();
        assert_eq!(m.action_rate, vec![0.0, 0.0, 1.0]);
        assert_eq!(m.gate_open_rate, 1.0);
        assert_eq!(m.avg_quality, 1.0);
        assert_eq!(m.avg_cost, 2.0);
    }

    #[test]
    fn misaligned_inputs_are_rejected() {
        let reward = RewardParams::default();
        let (records, samples) = slice_fixture(&[0, 1], &reward);
        assert!(compute_slice_metrics(0, &records[..1], &samples, 2.0, &reward, 0.0).is_err());
        let mut swapped = records.clone();
        swapped.swap(0, 1);
        assert!(compute_slice_metrics(0, &swapped, &samples, 2.0, &reward, 0.0).is_err());
        let mut forged = records.clone();
        forged[0].reward = 0.9;
        assert!(compute_slice_metrics(0, &forged, &samples, 2.0, &reward, 0.0).is_err());
    }

    #[test]
    fn csv_parses_back() {
        let reward = RewardParams::default();
        let (records, samples) = slice_fixture(&[0, 1, 2], &reward);
        let m = compute_slice_metrics(0, &records, &samples, 2.0, &reward, 0.0).unwrap();
        let text = metrics_csv(std::slice::from_ref(&m));
        let table = MetricsTable::parse(&text).unwrap();
        assert_eq!(table.columns.len(), 5 + 3);
        assert_eq!(table.column("avg_reward").unwrap(), vec![m.avg_reward]);
        assert!(domains_csv(&[m]).starts_with("slice,domain_id,avg_reward,count\n0,0,"));
    }
}
