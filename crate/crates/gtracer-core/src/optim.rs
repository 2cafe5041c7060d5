//! Optimizers behind a uniform step interface: SGD, SGD with momentum, Adam,
//! SAM, SGD-TRACER and Adam-TRACER.
//!
//! The TRACER family augments the batch loss with the squared-gradient ratio
//! penalty `ρ ⟨(∇L)², (f̄+δ)^{-1}⟩`, where `f̄` is an exponentially smoothed
//! squared-gradient (empirical Fisher diagonal) state. Its gradient is taken
//! with `f̄` frozen, giving `∇L + 2ρ H (∇L ⊘ (f̄+δ))`; the Hessian-vector
//! product costs two extra gradient passes, the same cost profile as SAM's
//! two passes.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autodiff::{
    self, default_fd_step, hvp, l2, loss_and_gradient, HvpRequest, ParamVector,
};
use crate::error::{Error, Result};
use crate::models::{DataBatch, Model};

/// Damping constant `δ` for the penalty denominator `f̄ + δ`.
///
/// `Auto` resolves to `max(1e-8 · (1 + mean(f̄₀)), 1e-12)` when the Fisher
/// state is initialized from the first batch gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Damping {
    Fixed(f64),
    Auto,
}

impl Damping {
    fn resolve(self, fbar0: &[f64]) -> f64 {
        match self {
            Damping::Fixed(d) => d,
            Damping::Auto => {
                let mean = fbar0.iter().sum::<f64>() / fbar0.len().max(1) as f64;
                (1e-8 * (1.0 + mean)).max(1e-12)
            }
        }
    }

    pub fn validate(self) -> Result<()> {
        if let Damping::Fixed(d) = self {
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::invalid(format!("damping must be positive, got {d}")));
            }
        }
        Ok(())
    }
}

impl Serialize for Damping {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Damping::Fixed(d) => s.serialize_f64(*d),
            Damping::Auto => s.serialize_str("auto"),
        }
    }
}

impl<'de> Deserialize<'de> for Damping {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(Damping::Fixed(x)),
            Repr::Text(t) if t == "auto" => Ok(Damping::Auto),
            Repr::Text(t) => Err(D::Error::custom(format!(
                "delta must be a number or \"auto\", got {t:?}"
            ))),
        }
    }
}

/// Exponentially smoothed squared-gradient state `f̄` (online empirical
/// Fisher diagonal) with smoothing `β` and damping `δ`.
///
/// Every entry stays nonnegative (each update is a convex combination of
/// squares), and `k` updates with zero gradients decay it to `(1−β)^k f̄₀`.
#[derive(Debug, Clone)]
pub struct FisherState {
    fbar: Vec<f64>,
    beta: f64,
    damping: Damping,
    delta: f64,
    initialized: bool,
}

impl FisherState {
    pub fn new(p: usize, beta: f64, damping: Damping) -> Result<Self> {
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::invalid(format!("beta must be in (0,1], got {beta}")));
        }
        damping.validate()?;
        Ok(FisherState {
            fbar: vec![0.0; p],
            beta,
            damping,
            delta: match damping {
                Damping::Fixed(d) => d,
                Damping::Auto => f64::NAN,
            },
            initialized: false,
        })
    }

    /// Test/diagnostic constructor with explicit `f̄` contents; `delta` may
    /// be zero here (the invariance checks use the `δ → 0` limit).
    pub fn from_parts(fbar: Vec<f64>, beta: f64, delta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::invalid(format!("beta must be in (0,1], got {beta}")));
        }
        if delta < 0.0 || !delta.is_finite() {
            return Err(Error::invalid(format!("delta must be nonnegative, got {delta}")));
        }
        if fbar.iter().any(|&x| x < 0.0) {
            return Err(Error::invalid("fbar entries must be nonnegative"));
        }
        Ok(FisherState { fbar, beta, damping: Damping::Fixed(delta), delta, initialized: true })
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn len(&self) -> usize {
        self.fbar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fbar.is_empty()
    }

    pub fn fbar(&self) -> &[f64] {
        &self.fbar
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// `Σᵢ f̄ᵢ`, the running Fisher-trace estimate.
    pub fn trace(&self) -> f64 {
        self.fbar.iter().sum()
    }

    /// Set `f̄₀ = g₀²` on the first observed gradient; avoids the transient
    /// where `f̄ ≈ 0` makes the first penalty step explode.
    pub fn initialize(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.fbar.len() {
            return Err(Error::Length { expected: self.fbar.len(), got: g.len() });
        }
        for (f, &gi) in self.fbar.iter_mut().zip(g) {
            *f = gi * gi;
        }
        self.delta = self.damping.resolve(&self.fbar);
        self.initialized = true;
        Ok(())
    }

    /// `f̄ ← (1−β) f̄ + β g²`.
    pub fn update(&mut self, g: &[f64]) -> Result<()> {
        if !self.initialized {
            return Err(Error::FisherUninitialized);
        }
        if g.len() != self.fbar.len() {
            return Err(Error::Length { expected: self.fbar.len(), got: g.len() });
        }
        for (f, &gi) in self.fbar.iter_mut().zip(g) {
            *f = (1.0 - self.beta) * *f + self.beta * gi * gi;
        }
        Ok(())
    }

    /// Initialize on first call, then apply the EMA update.
    pub fn observe(&mut self, g: &[f64]) -> Result<()> {
        if !self.initialized {
            self.initialize(g)?;
        }
        self.update(g)
    }
}

/// `ρ · Σᵢ gᵢ² / (f̄ᵢ + δ)` with explicit state pieces.
pub fn tracer_penalty_raw(g: &[f64], fbar: &[f64], delta: f64, rho: f64) -> Result<f64> {
    if g.len() != fbar.len() {
        return Err(Error::Length { expected: fbar.len(), got: g.len() });
    }
    let mut s = 0.0;
    for (gi, fi) in g.iter().zip(fbar) {
        s += gi * gi / (fi + delta);
    }
    Ok(rho * s)
}

/// Penalty value `ρ ⟨g², (f̄+δ)^{-1}⟩` for an initialized Fisher state.
pub fn tracer_penalty(g: &[f64], fs: &FisherState, rho: f64) -> Result<f64> {
    if !fs.is_initialized() {
        return Err(Error::FisherUninitialized);
    }
    tracer_penalty_raw(g, fs.fbar(), fs.delta(), rho)
}

/// TRACER configuration shared by the SGD and Adam variants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracerConfig {
    /// Penalty strength `ρ ≥ 0`.
    pub rho: f64,
    /// Smoothing constant `β ∈ (0,1]` (weight on the newest squared gradient).
    pub beta: f64,
    /// Damping `δ > 0` (or auto-resolved).
    pub delta: Damping,
    /// Finite-difference step for the penalty HVP; `None` uses
    /// `1e-4 · (1 + ||w||)`.
    #[serde(default)]
    pub fd_step: Option<f64>,
}

impl TracerConfig {
    pub fn new(rho: f64, beta: f64, delta: Damping) -> Result<Self> {
        let cfg = TracerConfig { rho, beta, delta, fd_step: None };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            return Err(Error::invalid(format!("rho must be >= 0, got {}", self.rho)));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::invalid(format!("beta must be in (0,1], got {}", self.beta)));
        }
        self.delta.validate()?;
        if let Some(s) = self.fd_step {
            if !(s > 0.0) {
                return Err(Error::invalid(format!("fd_step must be positive, got {s}")));
            }
        }
        Ok(())
    }
}

/// Augmented gradient `g + 2ρ H (g ⊘ (f̄+δ))` given a precomputed `g`.
///
/// `f̄` is treated as a constant: no gradient flows through the smoothing
/// recursion, matching the frozen-state line order of the update equations.
/// `ρ = 0` returns `g` unchanged (bit-for-bit; no extra passes).
pub fn tracer_grad_from<M: Model + ?Sized>(
    model: &M,
    w: &ParamVector,
    batch: &DataBatch,
    g: &[f64],
    fs: &FisherState,
    cfg: &TracerConfig,
) -> Result<Vec<f64>> {
    if !fs.is_initialized() {
        return Err(Error::FisherUninitialized);
    }
    if g.len() != fs.len() {
        return Err(Error::Length { expected: fs.len(), got: g.len() });
    }
    if cfg.rho == 0.0 {
        return Ok(g.to_vec());
    }
    let delta = fs.delta();
    let dir: Vec<f64> = g.iter().zip(fs.fbar()).map(|(gi, fi)| gi / (fi + delta)).collect();
    let fd_step = cfg.fd_step.unwrap_or_else(|| default_fd_step(w));
    let req = HvpRequest::with_step(w.clone(), dir, fd_step)?;
    let hv = hvp(model, &req, batch)?;
    Ok(g.iter().zip(&hv).map(|(gi, hvi)| gi + 2.0 * cfg.rho * hvi).collect())
}

/// Augmented gradient computed from scratch (one gradient pass plus the HVP).
pub fn tracer_grad<M: Model + ?Sized>(
    model: &M,
    w: &ParamVector,
    batch: &DataBatch,
    fs: &FisherState,
    cfg: &TracerConfig,
) -> Result<Vec<f64>> {
    let g = autodiff::gradient(model, w, batch)?;
    tracer_grad_from(model, w, batch, &g, fs, cfg)
}

/// One plain (momentum-free) SGD-TRACER step.
///
/// Order is fixed: the penalty gradient uses `f̄` from before the smoothing
/// update, and the smoothing update reuses the same batch gradient.
pub fn tracer_step<M: Model + ?Sized>(
    model: &M,
    w: &ParamVector,
    batch: &DataBatch,
    fs: &mut FisherState,
    cfg: &TracerConfig,
    lr: f64,
    step: usize,
) -> Result<ParamVector> {
    let g = autodiff::gradient(model, w, batch)?;
    if !fs.is_initialized() {
        fs.initialize(&g)?;
    }
    let aug = tracer_grad_from(model, w, batch, &g, fs, cfg)?;
    let mut out = w.clone();
    for (wi, ai) in out.as_mut_slice().iter_mut().zip(&aug) {
        *wi -= lr * ai;
    }
    if !out.all_finite() {
        return Err(Error::NonFiniteUpdate { step });
    }
    fs.update(&g)?;
    Ok(out)
}

/// SAM configuration: perturbation radius and base-optimizer momentum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamConfig {
    pub rho_sam: f64,
    pub momentum: f64,
}

impl SamConfig {
    pub fn new(rho_sam: f64, momentum: f64) -> Result<Self> {
        let cfg = SamConfig { rho_sam, momentum };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho_sam > 0.0) {
            return Err(Error::invalid(format!("rho_sam must be > 0, got {}", self.rho_sam)));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::invalid(format!("momentum must be in [0,1), got {}", self.momentum)));
        }
        Ok(())
    }
}

/// Gradient at the adversarially perturbed point
/// `w + ρ_sam · g/||g||` (two gradient evaluations; `||g|| = 0` degenerates
/// to the unperturbed gradient). Returns `(loss, ||g||, g_adv)` with the
/// norm of the unperturbed gradient.
pub fn sam_gradient<M: Model + ?Sized>(
    model: &M,
    w: &ParamVector,
    batch: &DataBatch,
    rho_sam: f64,
) -> Result<(f64, f64, Vec<f64>)> {
    let (loss, g) = loss_and_gradient(model, w, batch)?;
    let gnorm = l2(&g);
    if gnorm == 0.0 {
        return Ok((loss, gnorm, g));
    }
    let mut w_adv = w.clone();
    for (wi, gi) in w_adv.as_mut_slice().iter_mut().zip(&g) {
        *wi += rho_sam * gi / gnorm;
    }
    let g_adv = autodiff::gradient(model, &w_adv, batch)?;
    Ok((loss, gnorm, g_adv))
}

/// One plain SAM step `w ← w − lr · ∇L(w + ρ_sam g/||g||)`.
pub fn sam_step<M: Model + ?Sized>(
    model: &M,
    w: &ParamVector,
    batch: &DataBatch,
    cfg: &SamConfig,
    lr: f64,
    step: usize,
) -> Result<ParamVector> {
    let (_, _, g_adv) = sam_gradient(model, w, batch, cfg.rho_sam)?;
    let mut out = w.clone();
    for (wi, gi) in out.as_mut_slice().iter_mut().zip(&g_adv) {
        *wi -= lr * gi;
    }
    if !out.all_finite() {
        return Err(Error::NonFiniteUpdate { step });
    }
    Ok(out)
}

/// Per-step metrics surfaced by every optimizer.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    /// Mean batch loss at the pre-step point.
    pub loss: f64,
    /// `||∇L||₂` of the raw batch gradient.
    pub grad_norm: f64,
    /// TRACER penalty value (0 for non-TRACER optimizers).
    pub penalty: f64,
    /// `Σ f̄` when a Fisher state is maintained.
    pub fisher_trace: Option<f64>,
}

/// Uniform step interface; the harness drives every optimizer identically.
pub trait Optimizer {
    fn name(&self) -> &'static str;

    fn step(
        &mut self,
        model: &dyn Model,
        w: &mut ParamVector,
        batch: &DataBatch,
        lr: f64,
        step_idx: usize,
    ) -> Result<StepStats>;
}

/// Heavy-ball update shared by SGD, momentum-SGD, SAM and SGD-TRACER:
/// `v ← m·v + g; w ← w − lr·v` (plain `w ← w − lr·g` when `m = 0`, so the
/// zero-momentum path is bit-identical to plain SGD).
fn sgd_apply(w: &mut ParamVector, g: &[f64], lr: f64, momentum: f64, vel: &mut Vec<f64>) {
    if momentum == 0.0 {
        for (wi, gi) in w.as_mut_slice().iter_mut().zip(g) {
            *wi -= lr * gi;
        }
    } else {
        if vel.is_empty() {
            *vel = vec![0.0; g.len()];
        }
        for ((wi, vi), gi) in w.as_mut_slice().iter_mut().zip(vel.iter_mut()).zip(g) {
            *vi = momentum * *vi + gi;
            *wi -= lr * *vi;
        }
    }
}

/// Bias-corrected Adam moments, shared by Adam and Adam-TRACER.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl AdamState {
    pub fn new(p: usize, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
            if !(b >= 0.0 && b < 1.0) {
                return Err(Error::invalid(format!("{name} must be in [0,1), got {b}")));
            }
        }
        if !(eps > 0.0) {
            return Err(Error::invalid(format!("eps must be positive, got {eps}")));
        }
        Ok(AdamState { beta1, beta2, eps, m: vec![0.0; p], v: vec![0.0; p], t: 0 })
    }

    /// Second moment before bias correction.
    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    fn apply(&mut self, w: &mut ParamVector, g: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..g.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            w.as_mut_slice()[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

fn finite_or_diverged(w: &ParamVector, step: usize) -> Result<()> {
    if w.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteUpdate { step })
    }
}

/// Plain SGD, or heavy-ball momentum when `momentum > 0`.
pub struct Sgd {
    momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!("momentum must be in [0,1), got {momentum}")));
        }
        Ok(Sgd { momentum, velocity: Vec::new() })
    }
}

impl Optimizer for Sgd {
    fn name(&self) -> &'static str {
        if self.momentum == 0.0 {
            "sgd"
        } else {
            "momentum"
        }
    }

    fn step(
        &mut self,
        model: &dyn Model,
        w: &mut ParamVector,
        batch: &DataBatch,
        lr: f64,
        step_idx: usize,
    ) -> Result<StepStats> {
        let (loss, g) = loss_and_gradient(model, w, batch)?;
        sgd_apply(w, &g, lr, self.momentum, &mut self.velocity);
        finite_or_diverged(w, step_idx)?;
        Ok(StepStats { loss, grad_norm: l2(&g), penalty: 0.0, fisher_trace: None })
    }
}

pub struct Adam {
    state: Option<AdamState>,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        AdamState::new(0, beta1, beta2, eps)?;
        Ok(Adam { state: None, beta1, beta2, eps })
    }

    fn state_mut(&mut self, p: usize) -> &mut AdamState {
        if self.state.is_none() {
            self.state = Some(AdamState::new(p, self.beta1, self.beta2, self.eps).unwrap());
        }
        self.state.as_mut().unwrap()
    }
}

impl Optimizer for Adam {
    fn name(&self) -> &'static str {
        "adam"
    }

    fn step(
        &mut self,
        model: &dyn Model,
        w: &mut ParamVector,
        batch: &DataBatch,
        lr: f64,
        step_idx: usize,
    ) -> Result<StepStats> {
        let (loss, g) = loss_and_gradient(model, w, batch)?;
        self.state_mut(w.len()).apply(w, &g, lr);
        finite_or_diverged(w, step_idx)?;
        Ok(StepStats { loss, grad_norm: l2(&g), penalty: 0.0, fisher_trace: None })
    }
}

pub struct Sam {
    cfg: SamConfig,
    velocity: Vec<f64>,
}

impl Sam {
    pub fn new(cfg: SamConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Sam { cfg, velocity: Vec::new() })
    }
}

impl Optimizer for Sam {
    fn name(&self) -> &'static str {
        "sam"
    }

    fn step(
        &mut self,
        model: &dyn Model,
        w: &mut ParamVector,
        batch: &DataBatch,
        lr: f64,
        step_idx: usize,
    ) -> Result<StepStats> {
        let (loss, grad_norm, g_adv) = sam_gradient(model, w, batch, self.cfg.rho_sam)?;
        sgd_apply(w, &g_adv, lr, self.cfg.momentum, &mut self.velocity);
        finite_or_diverged(w, step_idx)?;
        Ok(StepStats { loss, grad_norm, penalty: 0.0, fisher_trace: None })
    }
}

/// SGD-TRACER: heavy-ball SGD on the TRACER-augmented gradient.
pub struct SgdTracer {
    cfg: TracerConfig,
    momentum: f64,
    fs: FisherState,
    velocity: Vec<f64>,
}

impl SgdTracer {
    pub fn new(p: usize, cfg: TracerConfig, momentum: f64) -> Result<Self> {
        cfg.validate()?;
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!("momentum must be in [0,1), got {momentum}")));
        }
        let fs = FisherState::new(p, cfg.beta, cfg.delta)?;
        Ok(SgdTracer { cfg, momentum, fs, velocity: Vec::new() })
    }

    pub fn fisher_state(&self) -> &FisherState {
        &self.fs
    }
}

impl Optimizer for SgdTracer {
    fn name(&self) -> &'static str {
        "sgd_tracer"
    }

    fn step(
        &mut self,
        model: &dyn Model,
        w: &mut ParamVector,
        batch: &DataBatch,
        lr: f64,
        step_idx: usize,
    ) -> Result<StepStats> {
        let (loss, g) = loss_and_gradient(model, w, batch)?;
        if !self.fs.is_initialized() {
            self.fs.initialize(&g)?;
        }
        let penalty = tracer_penalty(&g, &self.fs, self.cfg.rho)?;
        let aug = tracer_grad_from(model, w, batch, &g, &self.fs, &self.cfg)?;
        sgd_apply(w, &aug, lr, self.momentum, &mut self.velocity);
        finite_or_diverged(w, step_idx)?;
        self.fs.update(&g)?;
        Ok(StepStats {
            loss,
            grad_norm: l2(&g),
            penalty,
            fisher_trace: Some(self.fs.trace()),
        })
    }
}

/// Adam-TRACER: Adam applied to the TRACER-augmented gradient.
///
/// By default the Fisher state is a separate EMA driven by the raw gradient
/// (its own timescale `β`); `alias = true` instead reuses Adam's second
/// moment (pre-bias-correction) as `f̄`, reading it before the moment update
/// of the current step.
pub struct AdamTracer {
    cfg: TracerConfig,
    alias: bool,
    fs: FisherState,
    adam: AdamState,
}

impl AdamTracer {
    pub fn new(
        p: usize,
        cfg: TracerConfig,
        beta1: f64,
        beta2: f64,
        eps: f64,
        alias: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        let fs = FisherState::new(p, cfg.beta, cfg.delta)?;
        let adam = AdamState::new(p, beta1, beta2, eps)?;
        Ok(AdamTracer { cfg, alias, fs, adam })
    }

    pub fn fisher_state(&self) -> &FisherState {
        &self.fs
    }

    pub fn adam_state(&self) -> &AdamState {
        &self.adam
    }

    /// Effective penalty denominators: the aliased second moment or the
    /// dedicated EMA.
    pub fn effective_fbar(&self) -> &[f64] {
        if self.alias {
            self.adam.second_moment()
        } else {
            self.fs.fbar()
        }
    }
}

impl Optimizer for AdamTracer {
    fn name(&self) -> &'static str {
        "adam_tracer"
    }

    fn step(
        &mut self,
        model: &dyn Model,
        w: &mut ParamVector,
        batch: &DataBatch,
        lr: f64,
        step_idx: usize,
    ) -> Result<StepStats> {
        let (loss, g) = loss_and_gradient(model, w, batch)?;
        let (penalty, aug) = if self.alias {
            let delta = match self.cfg.delta {
                Damping::Fixed(d) => d,
                Damping::Auto => Damping::Auto.resolve(self.adam.second_moment()),
            };
            let penalty =
                tracer_penalty_raw(&g, self.adam.second_moment(), delta, self.cfg.rho)?;
            let aug = if self.cfg.rho == 0.0 {
                g.clone()
            } else {
                let dir: Vec<f64> = g
                    .iter()
                    .zip(self.adam.second_moment())
                    .map(|(gi, vi)| gi / (vi + delta))
                    .collect();
                let fd_step = self.cfg.fd_step.unwrap_or_else(|| default_fd_step(w));
                let req = HvpRequest::with_step(w.clone(), dir, fd_step)?;
                let hv = hvp(model, &req, batch)?;
                g.iter().zip(&hv).map(|(gi, hvi)| gi + 2.0 * self.cfg.rho * hvi).collect()
            };
            (penalty, aug)
        } else {
            if !self.fs.is_initialized() {
                self.fs.initialize(&g)?;
            }
            let penalty = tracer_penalty(&g, &self.fs, self.cfg.rho)?;
            let aug = tracer_grad_from(model, w, batch, &g, &self.fs, &self.cfg)?;
            (penalty, aug)
        };
        self.adam.apply(w, &aug, lr);
        finite_or_diverged(w, step_idx)?;
        let fisher_trace = if self.alias {
            let t = self.adam.second_moment().iter().sum();
            Some(t)
        } else {
            self.fs.update(&g)?;
            Some(self.fs.trace())
        };
        Ok(StepStats { loss, grad_norm: l2(&g), penalty, fisher_trace })
    }
}

/// Serializable optimizer selection; the registry for configs and sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerSpec {
    Sgd {},
    Momentum {
        momentum: f64,
    },
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
    Sam {
        rho_sam: f64,
        momentum: f64,
    },
    SgdTracer {
        rho: f64,
        beta: f64,
        delta: Damping,
        momentum: f64,
        #[serde(default)]
        fd_step: Option<f64>,
    },
    AdamTracer {
        rho: f64,
        beta: f64,
        delta: Damping,
        beta1: f64,
        beta2: f64,
        eps: f64,
        #[serde(default)]
        alias: bool,
        #[serde(default)]
        fd_step: Option<f64>,
    },
}

impl OptimizerSpec {
    pub const NAMES: [&'static str; 6] =
        ["sgd", "momentum", "adam", "sam", "sgd_tracer", "adam_tracer"];

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerSpec::Sgd {} => "sgd",
            OptimizerSpec::Momentum { .. } => "momentum",
            OptimizerSpec::Adam { .. } => "adam",
            OptimizerSpec::Sam { .. } => "sam",
            OptimizerSpec::SgdTracer { .. } => "sgd_tracer",
            OptimizerSpec::AdamTracer { .. } => "adam_tracer",
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.clone().build(1).map(|_| ())
    }

    pub fn build(&self, p: usize) -> Result<Box<dyn Optimizer + Send>> {
        Ok(match self.clone() {
            OptimizerSpec::Sgd {} => Box::new(Sgd::new(0.0)?),
            OptimizerSpec::Momentum { momentum } => Box::new(Sgd::new(momentum)?),
            OptimizerSpec::Adam { beta1, beta2, eps } => Box::new(Adam::new(beta1, beta2, eps)?),
            OptimizerSpec::Sam { rho_sam, momentum } => {
                Box::new(Sam::new(SamConfig::new(rho_sam, momentum)?)?)
            }
            OptimizerSpec::SgdTracer { rho, beta, delta, momentum, fd_step } => {
                let mut cfg = TracerConfig::new(rho, beta, delta)?;
                cfg.fd_step = fd_step;
                cfg.validate()?;
                Box::new(SgdTracer::new(p, cfg, momentum)?)
            }
            OptimizerSpec::AdamTracer { rho, beta, delta, beta1, beta2, eps, alias, fd_step } => {
                let mut cfg = TracerConfig::new(rho, beta, delta)?;
                cfg.fd_step = fd_step;
                cfg.validate()?;
                Box::new(AdamTracer::new(p, cfg, beta1, beta2, eps, alias)?)
            }
        })
    }

    /// Set a sweepable hyperparameter; errors when the parameter does not
    /// apply to this optimizer.
    pub fn set_param(&mut self, param: &str, value: f64) -> Result<()> {
        let name = self.name();
        match (param, &mut *self) {
            ("rho", OptimizerSpec::SgdTracer { rho, .. })
            | ("rho", OptimizerSpec::AdamTracer { rho, .. }) => *rho = value,
            ("beta", OptimizerSpec::SgdTracer { beta, .. })
            | ("beta", OptimizerSpec::AdamTracer { beta, .. }) => *beta = value,
            ("delta", OptimizerSpec::SgdTracer { delta, .. })
            | ("delta", OptimizerSpec::AdamTracer { delta, .. }) => {
                *delta = Damping::Fixed(value)
            }
            ("rho_sam", OptimizerSpec::Sam { rho_sam, .. }) => *rho_sam = value,
            _ => {
                return Err(Error::config(format!(
                    "parameter {param:?} does not apply to optimizer {name:?}"
                )))
            }
        }
        Ok(())
    }
}
