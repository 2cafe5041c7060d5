//! Geometry diagnostics at a trained checkpoint, emitted as one JSON record.

use serde::{Deserialize, Serialize};

use crate::autodiff::{self, hvp, HvpRequest, ParamVector};
use crate::error::Result;
use crate::geometry::{
    empirical_fisher_diag, hutchinson_trace, perturbation_flatness_profile, FisherMode,
    FlatnessRow, LaplaceSummary, TraceEstimate, MAX_EXPLICIT_HESSIAN_DIM,
};
use crate::models::Model;
use crate::rng;

use super::config::ExperimentConfig;
use super::data::make_dataset;
use super::runner::load_checkpoint;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnoseReport {
    pub mode_id: String,
    pub p: usize,
    pub train_loss: f64,
    pub grad_norm: f64,
    pub hessian_trace: TraceEstimate,
    /// Laplace evidence when `p ≤ 100`, the point is a mode, and the Hessian
    /// is PD; otherwise the reason it was skipped.
    pub laplace: Option<LaplaceSummary>,
    pub laplace_skipped: Option<String>,
    pub flatness_profile: Vec<FlatnessRow>,
    pub fisher_diag_gm_mean: f64,
    pub fisher_diag_per_example_mean: f64,
}

/// Run the geometry diagnostics for a trained checkpoint against the
/// config's training set.
pub fn diagnose(cfg: &ExperimentConfig, checkpoint: &std::path::Path) -> Result<DiagnoseReport> {
    cfg.validate()?;
    let (w, meta) = load_checkpoint(checkpoint)?;
    let (train, _) = make_dataset(&cfg.dataset)?;
    let n_classes = train.n_classes().unwrap_or(1);
    let model = meta.model.build(train.input_dim(), n_classes)?;
    diagnose_at(model.as_ref(), &w, &train, &format!("checkpoint seed {}", meta.seed))
}

/// Diagnostics at an explicit `(model, w, batch)` triple.
pub fn diagnose_at(
    model: &dyn Model,
    w: &ParamVector,
    batch: &crate::models::DataBatch,
    mode_id: &str,
) -> Result<DiagnoseReport> {
    let p = model.dim();
    let (train_loss, grad) = autodiff::loss_and_gradient(model, w, batch)?;
    let grad_norm = grad.iter().map(|x| x * x).sum::<f64>().sqrt();

    let hvp_fn = |v: &[f64]| {
        let req = HvpRequest::new(w.clone(), v.to_vec())?;
        hvp(model, &req, batch)
    };
    let seed = rng::subseed(0xd1a6, "diagnose", p as u64);
    let hessian_trace = hutchinson_trace(&hvp_fn, p, 64, seed)?;

    let (laplace, laplace_skipped) = if p <= MAX_EXPLICIT_HESSIAN_DIM {
        match crate::geometry::laplace_log_evidence(w, train_loss, grad_norm, &hvp_fn) {
            Ok(s) => (Some(s), None),
            Err(e) => (None, Some(e.to_string())),
        }
    } else {
        (None, Some(format!("p = {p} exceeds explicit-Hessian limit {MAX_EXPLICIT_HESSIAN_DIM}")))
    };

    let radii = [0.0, 0.01, 0.02, 0.05, 0.1];
    let flatness_profile = perturbation_flatness_profile(model, w, batch, &radii, 64, seed)?;

    let gm = empirical_fisher_diag(model, w, batch, FisherMode::GradientMagnitude)?;
    let pe = empirical_fisher_diag(model, w, batch, FisherMode::PerExample)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;

    Ok(DiagnoseReport {
        mode_id: mode_id.to_string(),
        p,
        train_loss,
        grad_norm,
        hessian_trace,
        laplace,
        laplace_skipped,
        flatness_profile,
        fisher_diag_gm_mean: mean(&gm),
        fisher_diag_per_example_mean: mean(&pe),
    })
}
