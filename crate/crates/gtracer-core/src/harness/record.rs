//! Run records and their persistence: per-epoch metric rows as CSV, run and
//! replicate summaries as JSON. Identical configs and seeds produce
//! byte-identical CSV files; wall-clock timing lives only in the summaries.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: &str =
    "step,epoch,train_loss,test_loss,test_accuracy,penalty,grad_norm,fisher_trace";

/// One persisted row of training metrics (per epoch; `step` is the global
/// step count at the end of the epoch).
#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub step: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: Option<f64>,
    pub penalty: f64,
    pub grad_norm: f64,
    pub fisher_trace: Option<f64>,
}

impl RunRow {
    pub fn all_finite(&self) -> bool {
        let opts = [self.test_accuracy.unwrap_or(0.0), self.fisher_trace.unwrap_or(0.0)];
        self.train_loss.is_finite()
            && self.test_loss.is_finite()
            && self.penalty.is_finite()
            && self.grad_norm.is_finite()
            && opts.iter().all(|x| x.is_finite())
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_metrics_csv(path: &Path, rows: &[RunRow]) -> Result<()> {
    let mut out = String::with_capacity(rows.len() * 96 + CSV_HEADER.len() + 1);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.step,
            r.epoch,
            r.train_loss,
            r.test_loss,
            fmt_opt(r.test_accuracy),
            r.penalty,
            r.grad_norm,
            fmt_opt(r.fisher_trace),
        ));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<RunRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(Error::invalid(format!("bad metrics header: {other:?}")));
        }
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(Error::invalid(format!(
                "line {}: expected 8 fields, got {}",
                lineno + 2,
                fields.len()
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::invalid(format!("line {}: {e}", lineno + 2)))
        };
        let parse_opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                parse(s).map(Some)
            }
        };
        rows.push(RunRow {
            step: fields[0]
                .parse()
                .map_err(|e| Error::invalid(format!("line {}: {e}", lineno + 2)))?,
            epoch: fields[1]
                .parse()
                .map_err(|e| Error::invalid(format!("line {}: {e}", lineno + 2)))?,
            train_loss: parse(fields[2])?,
            test_loss: parse(fields[3])?,
            test_accuracy: parse_opt(fields[4])?,
            penalty: parse(fields[5])?,
            grad_norm: parse(fields[6])?,
            fisher_trace: parse_opt(fields[7])?,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

/// Summary of one seed's run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub optimizer: String,
    pub seed: u64,
    pub status: RunStatus,
    pub failed_at_step: Option<usize>,
    pub epochs_completed: usize,
    pub steps_completed: usize,
    pub final_train_loss: Option<f64>,
    pub final_test_loss: Option<f64>,
    pub final_test_accuracy: Option<f64>,
    pub best_test_accuracy: Option<f64>,
    pub wall_clock_seconds: f64,
}

/// Aggregate over replicate seeds; failed runs are counted, never averaged.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicateSummary {
    pub schema_version: u32,
    pub optimizer: String,
    pub n_replicates: usize,
    pub n_failed: usize,
    pub seeds: Vec<u64>,
    pub mean_final_test_accuracy: Option<f64>,
    pub std_error_final_test_accuracy: Option<f64>,
    pub mean_best_test_accuracy: Option<f64>,
    pub std_error_best_test_accuracy: Option<f64>,
    pub wall_clock_seconds_total: f64,
    pub per_seed: Vec<RunSummary>,
}

/// `(mean, sample-std/√n)`; the standard error is 0 for a single value.
pub fn mean_and_std_error(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Some((mean, (var / n).sqrt()))
}

pub fn summarize_replicates(per_seed: Vec<RunSummary>) -> ReplicateSummary {
    let n_replicates = per_seed.len();
    let n_failed = per_seed.iter().filter(|s| s.status == RunStatus::Failed).count();
    let finals: Vec<f64> = per_seed
        .iter()
        .filter(|s| s.status == RunStatus::Ok)
        .filter_map(|s| s.final_test_accuracy)
        .collect();
    let bests: Vec<f64> = per_seed
        .iter()
        .filter(|s| s.status == RunStatus::Ok)
        .filter_map(|s| s.best_test_accuracy)
        .collect();
    let (mean_final, se_final) = match mean_and_std_error(&finals) {
        Some((m, s)) => (Some(m), Some(s)),
        None => (None, None),
    };
    let (mean_best, se_best) = match mean_and_std_error(&bests) {
        Some((m, s)) => (Some(m), Some(s)),
        None => (None, None),
    };
    ReplicateSummary {
        schema_version: super::config::SCHEMA_VERSION,
        optimizer: per_seed
            .first()
            .map(|s| s.optimizer.clone())
            .unwrap_or_default(),
        n_replicates,
        n_failed,
        seeds: per_seed.iter().map(|s| s.seed).collect(),
        mean_final_test_accuracy: mean_final,
        std_error_final_test_accuracy: se_final,
        mean_best_test_accuracy: mean_best,
        std_error_best_test_accuracy: se_best,
        wall_clock_seconds_total: per_seed.iter().map(|s| s.wall_clock_seconds).sum(),
        per_seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: usize) -> RunRow {
        RunRow {
            step,
            epoch: step / 10,
            train_loss: 0.5 / (step as f64 + 1.0),
            test_loss: 0.6 / (step as f64 + 1.0),
            test_accuracy: Some(0.9),
            penalty: 0.001,
            grad_norm: 0.1,
            fisher_trace: None,
        }
    }

    #[test]
    fn csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let rows: Vec<RunRow> = (0..5).map(|i| row(i * 10)).collect();
        write_metrics_csv(&path, &rows).unwrap();
        let back = read_metrics_csv(&path).unwrap();
        assert_eq!(rows, back);
    }

    #[test]
    fn std_error_matches_direct_formula() {
        let values = [0.8, 0.85, 0.9, 0.7, 0.95];
        let (mean, se) = mean_and_std_error(&values).unwrap();
        let m: f64 = values.iter().sum::<f64>() / 5.0;
        let sd =
            (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 4.0).sqrt();
        assert!((mean - m).abs() < 1e-15);
        assert!((se - sd / 5f64.sqrt()).abs() < 1e-15);
    }
}
