//! Run aggregation and the text formats the CLI writes.
//!
//! Floats are formatted with `{}`, which in Rust prints the shortest string
//! that round-trips; parsing a log back yields bit-identical values, and two
//! identical runs produce byte-identical files.

use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::EpochLog;
use crate::sim::EpisodeResult;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no data points")]
    Empty,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub const TRAIN_LOG_HEADER: &str = "epoch,mean_return,scheduled_length,loss,epsilon,buffer_size";

pub fn format_log_row(row: &EpochLog) -> String {
    format!(
        "{},{},{},{},{},{}",
        row.epoch, row.mean_return, row.scheduled_length, row.loss, row.epsilon, row.buffer_size
    )
}

fn field<T: FromStr>(parts: &[&str], idx: usize, line: usize) -> Result<T, MetricsError> {
    parts
        .get(idx)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| MetricsError::Parse {
            line,
            msg: format!("bad field {idx}"),
        })
}

pub fn parse_log_row(s: &str, line: usize) -> Result<EpochLog, MetricsError> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 6 {
        return Err(MetricsError::Parse {
            line,
            msg: format!("expected 6 fields, got {}", parts.len()),
        });
    }
    Ok(EpochLog {
        epoch: field(&parts, 0, line)?,
        mean_return: field(&parts, 1, line)?,
        scheduled_length: field(&parts, 2, line)?,
        loss: field(&parts, 3, line)?,
        epsilon: field(&parts, 4, line)?,
        buffer_size: field(&parts, 5, line)?,
    })
}

/// Parses a full training log (header plus rows).
pub fn parse_log(text: &str) -> Result<Vec<EpochLog>, MetricsError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == TRAIN_LOG_HEADER => {}
        Some((_, h)) => {
            return Err(MetricsError::Parse {
                line: 1,
                msg: format!("unexpected header {h:?}"),
            })
        }
        None => return Err(MetricsError::Empty),
    }
    lines
        .filter(|(_, s)| !s.is_empty())
        .map(|(i, s)| parse_log_row(s, i + 1))
        .collect()
}

/// Mean and sample standard deviation; std is None for fewer than two
/// points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub mean: f64,
    pub std: Option<f64>,
}

impl MetricStats {
    pub fn of(values: &[f64]) -> Result<MetricStats, MetricsError> {
        if values.is_empty() {
            return Err(MetricsError::Empty);
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            None
        } else {
            let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
            Some((ss / (n - 1.0)).sqrt())
        };
        Ok(MetricStats { mean, std })
    }
}

/// Per-policy aggregate over a set of evaluation episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub policy: String,
    pub n: usize,
    pub scheduled_length: MetricStats,
    pub avg_cpu_utilization: MetricStats,
    pub income: MetricStats,
}

pub fn aggregate(policy: &str, results: &[EpisodeResult]) -> Result<RunSummary, MetricsError> {
    if results.is_empty() {
        return Err(MetricsError::Empty);
    }
    let lengths: Vec<f64> = results.iter().map(|r| r.scheduled_length as f64).collect();
    let utils: Vec<f64> = results.iter().map(|r| r.avg_cpu_utilization).collect();
    let incomes: Vec<f64> = results.iter().map(|r| r.income).collect();
    Ok(RunSummary {
        policy: policy.to_string(),
        n: results.len(),
        scheduled_length: MetricStats::of(&lengths)?,
        avg_cpu_utilization: MetricStats::of(&utils)?,
        income: MetricStats::of(&incomes)?,
    })
}

/// One comparison-table line: a policy's metric at one warm-start load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub rho_ws: f64,
    pub policy: String,
    pub metric: String,
    pub mean: f64,
    pub std: Option<f64>,
    pub n: usize,
}

pub const TABLE_HEADER: &str = "rho_ws,policy,metric,mean,std,n";

pub fn format_table_row(row: &TableRow) -> String {
    let std = match row.std {
        Some(s) => s.to_string(),
        None => String::new(),
    };
    format!(
        "{},{},{},{},{},{}",
        row.rho_ws, row.policy, row.metric, row.mean, std, row.n
    )
}

impl RunSummary {
    pub fn table_rows(&self, rho_ws: f64) -> Vec<TableRow> {
        let mk = |metric: &str, stats: MetricStats| TableRow {
            rho_ws,
            policy: self.policy.clone(),
            metric: metric.to_string(),
            mean: stats.mean,
            std: stats.std,
            n: self.n,
        };
        vec![
            mk("scheduled_length", self.scheduled_length),
            mk("avg_cpu_utilization", self.avg_cpu_utilization),
            mk("income", self.income),
        ]
    }
}

/// Moving average with leading partial windows: point `i` averages the last
/// `window` values up to and including `i`, or fewer at the start.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    assert!(window >= 1, "window must be at least 1");
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for i in 0..values.len() {
        sum += values[i];
        if i >= window {
            sum -= values[i - window];
        }
        let denom = (i + 1).min(window) as f64;
        out.push(sum / denom);
    }
    out
}

/// A smoothed learning-curve point aggregated across seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub mean: f64,
    pub std: Option<f64>,
}

pub const CURVE_HEADER: &str = "epoch,mean,std";

pub fn format_curve_point(p: &CurvePoint) -> String {
    let std = match p.std {
        Some(s) => s.to_string(),
        None => String::new(),
    };
    format!("{},{},{}", p.epoch, p.mean, std)
}

/// Smooths each seed's scheduled length with [`moving_average`], then takes
/// mean and std across seeds per epoch. Runs are truncated to the shortest.
pub fn learning_curve(runs: &[Vec<EpochLog>], window: usize) -> Result<Vec<CurvePoint>, MetricsError> {
    if runs.is_empty() || runs.iter().any(|r| r.is_empty()) {
        return Err(MetricsError::Empty);
    }
    let len = runs.iter().map(|r| r.len()).min().unwrap();
    let smoothed: Vec<Vec<f64>> = runs
        .iter()
        .map(|r| {
            let series: Vec<f64> = r[..len].iter().map(|e| e.scheduled_length).collect();
            moving_average(&series, window)
        })
        .collect();
    (0..len)
        .map(|i| {
            let at: Vec<f64> = smoothed.iter().map(|s| s[i]).collect();
            let stats = MetricStats::of(&at)?;
            Ok(CurvePoint {
                epoch: runs[0][i].epoch,
                mean: stats.mean,
                std: stats.std,
            })
        })
        .collect()
}
