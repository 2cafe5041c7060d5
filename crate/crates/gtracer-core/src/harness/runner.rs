//! Seed-controlled training runs and their persistence.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{self, ParamVector};
use crate::error::{Error, Result};
use crate::models::{accuracy, DataBatch, Model};
use crate::rng;

use super::config::{ExperimentConfig, ModelSpec, SCHEMA_VERSION};
use super::data::make_dataset;
use super::record::{
    summarize_replicates, write_metrics_csv, ReplicateSummary, RunRow, RunStatus, RunSummary,
};

/// Cap on run-level parallelism: `TRACER_THREADS`, defaulting to the number
/// of hardware threads.
pub fn max_threads() -> usize {
    if let Ok(v) = std::env::var("TRACER_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// Order-preserving parallel map over independent items, capped by
/// [`max_threads`]. Falls back to a sequential loop for a single worker.
pub(crate) fn parallel_map<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    let workers = max_threads().min(items.len().max(1));
    if workers <= 1 || items.len() <= 1 {
        return items.into_iter().map(f).collect();
    }
    let mut slots: Vec<Option<R>> = Vec::with_capacity(items.len());
    slots.resize_with(items.len(), || None);
    let chunk = items.len().div_ceil(workers);
    let mut pieces: Vec<Vec<(usize, T)>> = Vec::with_capacity(workers);
    let mut cur = Vec::with_capacity(chunk);
    for pair in items.into_iter().enumerate() {
        cur.push(pair);
        if cur.len() == chunk {
            pieces.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        pieces.push(cur);
    }
    let fref = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = pieces
            .into_iter()
            .map(|piece| {
                scope.spawn(move || {
                    piece
                        .into_iter()
                        .map(|(i, item)| (i, fref(item)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("all slots filled")).collect()
}

/// In-memory result of one seed's training run.
#[derive(Debug)]
pub struct TrainedRun {
    pub rows: Vec<RunRow>,
    pub summary: RunSummary,
    /// Final parameters; absent when the run diverged.
    pub final_w: Option<ParamVector>,
    pub dim: usize,
}

/// Train one replicate on the config's dataset. Divergence (non-finite loss
/// or update) marks the run failed in the summary rather than erroring;
/// configuration and I/O problems are errors.
pub fn train_single(cfg: &ExperimentConfig, seed: u64) -> Result<TrainedRun> {
    cfg.validate()?;
    let (train, test) = make_dataset(&cfg.dataset)?;
    train_on(cfg, &train, &test, seed)
}

/// Train one replicate against explicit train/test batches (the dataset spec
/// in `cfg` is ignored); used for custom splits such as validation tuning.
pub fn train_on(
    cfg: &ExperimentConfig,
    train: &DataBatch,
    test: &DataBatch,
    seed: u64,
) -> Result<TrainedRun> {
    let started = Instant::now();
    let n_classes = train.n_classes().unwrap_or(1);
    let model = cfg.model.build(train.input_dim(), n_classes)?;
    let mut w = cfg.model.init_params(train.input_dim(), n_classes, seed)?;
    let p = model.dim();
    if w.len() != p {
        return Err(Error::config(format!(
            "initial parameters have length {}, model has {p}",
            w.len()
        )));
    }
    let mut optimizer = cfg.optimizer.build(p)?;

    let n = train.n();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;

    let mut rows: Vec<RunRow> = Vec::with_capacity(cfg.epochs);
    let mut status = RunStatus::Ok;
    let mut failed_at_step = None;
    let mut step = 0usize;

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        {
            use rand::seq::SliceRandom;
            let mut r = rng::stream(seed, "shuffle", epoch as u64);
            order.shuffle(&mut r);
        }
        let mut loss_sum = 0.0;
        let mut penalty_sum = 0.0;
        let mut grad_norm_sum = 0.0;
        let mut fisher_trace_last = None;
        let mut batches = 0usize;

        for chunk in order.chunks(cfg.batch_size) {
            let batch = train.select(chunk)?;
            let lr = cfg.schedule.value(step, total_steps);
            match optimizer.step(model.as_ref(), &mut w, &batch, lr, step) {
                Ok(stats) => {
                    if !stats.loss.is_finite() {
                        status = RunStatus::Failed;
                        failed_at_step = Some(step);
                        break 'epochs;
                    }
                    loss_sum += stats.loss;
                    penalty_sum += stats.penalty;
                    grad_norm_sum += stats.grad_norm;
                    fisher_trace_last = stats.fisher_trace;
                    batches += 1;
                    step += 1;
                }
                Err(
                    Error::NonFiniteUpdate { .. }
                    | Error::NonFiniteLoss { .. }
                    | Error::Diverged { .. },
                ) => {
                    status = RunStatus::Failed;
                    failed_at_step = Some(step);
                    break 'epochs;
                }
                Err(other) => return Err(other),
            }
        }

        let test_loss = autodiff::loss(model.as_ref(), &w, test)?;
        if !test_loss.is_finite() {
            status = RunStatus::Failed;
            failed_at_step = Some(step);
            break 'epochs;
        }
        let row = RunRow {
            step,
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            test_loss,
            test_accuracy: accuracy(model.as_ref(), &w, test),
            penalty: penalty_sum / batches.max(1) as f64,
            grad_norm: grad_norm_sum / batches.max(1) as f64,
            fisher_trace: fisher_trace_last,
        };
        if !row.all_finite() {
            status = RunStatus::Failed;
            failed_at_step = Some(step);
            break 'epochs;
        }
        rows.push(row);
    }

    let last = rows.last();
    let best = rows
        .iter()
        .filter_map(|r| r.test_accuracy)
        .fold(None, |acc: Option<f64>, x| Some(acc.map_or(x, |a| a.max(x))));
    let diverged = status == RunStatus::Failed;
    let summary = RunSummary {
        schema_version: SCHEMA_VERSION,
        optimizer: cfg.optimizer.name().to_string(),
        seed,
        status,
        failed_at_step,
        epochs_completed: rows.len(),
        steps_completed: step,
        final_train_loss: last.map(|r| r.train_loss),
        final_test_loss: last.map(|r| r.test_loss),
        final_test_accuracy: last.and_then(|r| r.test_accuracy),
        best_test_accuracy: best,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    Ok(TrainedRun { rows, summary, final_w: (!diverged).then_some(w), dim: p })
}

/// Checkpoint sidecar: model spec plus dimensions and seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub model: ModelSpec,
    pub p: usize,
    pub seed: u64,
}

/// Write `checkpoint.bin` (raw little-endian f64 dump) and
/// `checkpoint.json` (sidecar) into `dir`.
pub fn save_checkpoint(dir: &Path, w: &ParamVector, model: &ModelSpec, seed: u64) -> Result<()> {
    let mut bytes = Vec::with_capacity(w.len() * 8);
    for x in w.as_slice() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    std::fs::write(dir.join("checkpoint.bin"), bytes)?;
    let meta = CheckpointMeta {
        schema_version: SCHEMA_VERSION,
        model: model.clone(),
        p: w.len(),
        seed,
    };
    std::fs::write(dir.join("checkpoint.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Load a checkpoint pair written by [`save_checkpoint`]. `path` may point
/// at either the `.bin` file or its directory.
pub fn load_checkpoint(path: &Path) -> Result<(ParamVector, CheckpointMeta)> {
    let (bin, sidecar) = if path.is_dir() {
        (path.join("checkpoint.bin"), path.join("checkpoint.json"))
    } else {
        (path.to_path_buf(), path.with_extension("json"))
    };
    let bytes = std::fs::read(&bin)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::invalid(format!(
            "checkpoint {} has {} bytes, not a multiple of 8",
            bin.display(),
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let meta: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(&sidecar)?)?;
    if meta.p != values.len() {
        return Err(Error::invalid(format!(
            "sidecar says p={}, checkpoint holds {}",
            meta.p,
            values.len()
        )));
    }
    Ok((ParamVector::new(values), meta))
}

/// Run every replicate seed (concurrently, capped by `TRACER_THREADS`),
/// persist per-run metrics/checkpoints under `cfg.output_dir/run_<seed>/`,
/// and write the aggregate `summary.json`.
pub fn run_to_dir(cfg: &ExperimentConfig) -> Result<ReplicateSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let results: Vec<Result<RunSummary>> = parallel_map(
        cfg.replicate_seeds.clone(),
        |seed| -> Result<RunSummary> {
            let run = train_single(cfg, seed)?;
            let dir = run_dir(&cfg.output_dir, seed);
            std::fs::create_dir_all(&dir)?;
            write_metrics_csv(&dir.join("metrics.csv"), &run.rows)?;
            std::fs::write(
                dir.join("summary.json"),
                serde_json::to_string_pretty(&run.summary)?,
            )?;
            if let Some(w) = &run.final_w {
                save_checkpoint(&dir, w, &cfg.model, seed)?;
            }
            Ok(run.summary)
        },
    );
    let mut summaries = Vec::with_capacity(results.len());
    for r in results {
        summaries.push(r?);
    }
    let replicate = summarize_replicates(summaries);
    std::fs::write(
        cfg.output_dir.join("summary.json"),
        serde_json::to_string_pretty(&replicate)?,
    )?;
    Ok(replicate)
}

pub fn run_dir(base: &Path, seed: u64) -> PathBuf {
    base.join(format!("run_{seed}"))
}

/// Final test accuracies over `seeds`, trained concurrently against explicit
/// batches (capped by `TRACER_THREADS`). A diverged replicate is an error;
/// callers doing hyperparameter sweeps should treat it as a losing entry
/// instead via [`train_on`].
pub fn train_accuracies(
    cfg: &ExperimentConfig,
    train: &DataBatch,
    test: &DataBatch,
    seeds: &[u64],
) -> Result<Vec<f64>> {
    let results: Vec<Result<f64>> = parallel_map(seeds.to_vec(), |seed| {
        let run = train_on(cfg, train, test, seed)?;
        run.summary.final_test_accuracy.ok_or_else(|| {
            Error::Diverged {
                step: run.summary.failed_at_step.unwrap_or(run.summary.steps_completed),
                reason: format!("seed {seed} produced no final accuracy"),
            }
        })
    });
    results.into_iter().collect()
}

/// Train/validation split of a batch (head/tail of a seeded permutation).
pub fn split_batch(batch: &DataBatch, val_fraction: f64, seed: u64) -> Result<(DataBatch, DataBatch)> {
    if !(0.0..1.0).contains(&val_fraction) || val_fraction == 0.0 {
        return Err(Error::invalid(format!(
            "val_fraction must be in (0,1), got {val_fraction}"
        )));
    }
    let n = batch.n();
    let n_val = ((n as f64) * val_fraction).round() as usize;
    if n_val == 0 || n_val >= n {
        return Err(Error::invalid("validation split would be empty"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    {
        use rand::seq::SliceRandom;
        let mut r = rng::stream(seed, "val-split", 0);
        order.shuffle(&mut r);
    }
    let val = batch.select(&order[..n_val])?;
    let tr = batch.select(&order[n_val..])?;
    Ok((tr, val))
}

/// Evaluate a model spec's accuracy on a batch given trained parameters.
pub fn eval_accuracy(model: &dyn Model, w: &ParamVector, batch: &DataBatch) -> Option<f64> {
    accuracy(model, w, batch)
}
