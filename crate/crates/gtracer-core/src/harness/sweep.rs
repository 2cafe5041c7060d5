//! Hyperparameter sweeps: one replicate set per value, aggregated into a
//! plot-ready CSV table.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::config::ExperimentConfig;
use super::record::ReplicateSummary;
use super::runner::run_to_dir;

pub const SWEEP_PARAMS: [&str; 5] = ["rho", "rho_sam", "lr", "beta", "delta"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub n: usize,
    pub n_failed: usize,
    pub mean_accuracy: Option<f64>,
    pub std_error: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepTable {
    pub parameter: String,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// `value,n,n_failed,mean_accuracy,std_error` with '.' decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("value,n,n_failed,mean_accuracy,std_error\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.value,
                r.n,
                r.n_failed,
                r.mean_accuracy.map(|v| v.to_string()).unwrap_or_default(),
                r.std_error.map(|v| v.to_string()).unwrap_or_default(),
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }

    /// Value with the best mean accuracy (failed-only values never win).
    pub fn best_value(&self) -> Option<f64> {
        self.rows
            .iter()
            .filter_map(|r| r.mean_accuracy.map(|m| (r.value, m)))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))
            .map(|(v, _)| v)
    }
}

/// Apply a sweepable parameter to a config copy.
pub fn apply_param(cfg: &ExperimentConfig, param: &str, value: f64) -> Result<ExperimentConfig> {
    let mut out = cfg.clone();
    match param {
        "lr" => out.schedule.set_lr0(value),
        "rho" | "rho_sam" | "beta" | "delta" => out.optimizer.set_param(param, value)?,
        other => {
            return Err(Error::config(format!(
                "unknown sweep parameter {other:?}; expected one of {SWEEP_PARAMS:?}"
            )))
        }
    }
    out.validate()?;
    Ok(out)
}

/// Run one replicate set per value; per-value artifacts land in
/// `<output_dir>/<param>_<index>/` and the table in `<output_dir>/sweep.csv`.
pub fn sweep(cfg: &ExperimentConfig, param: &str, values: &[f64]) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(Error::config("sweep needs a non-empty value list"));
    }
    std::fs::create_dir_all(&cfg.output_dir)?;
    let mut rows = Vec::with_capacity(values.len());
    for (i, &value) in values.iter().enumerate() {
        let mut run_cfg = apply_param(cfg, param, value)?;
        run_cfg.output_dir = cfg.output_dir.join(format!("{param}_{i}"));
        let summary: ReplicateSummary = run_to_dir(&run_cfg)?;
        rows.push(SweepRow {
            value,
            n: summary.n_replicates,
            n_failed: summary.n_failed,
            mean_accuracy: summary.mean_final_test_accuracy,
            std_error: summary.std_error_final_test_accuracy,
        });
    }
    let table = SweepTable { parameter: param.to_string(), rows };
    table.write_csv(&cfg.output_dir.join("sweep.csv"))?;
    Ok(table)
}
