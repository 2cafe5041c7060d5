//! Exact natural-gradient variational inference on quadratic losses.
//!
//! For a Gaussian family `q = N(μ, Λ^{-1})` and a quadratic loss the
//! Bonnet/Price expectations are available in closed form, so the
//! natural-gradient updates
//!
//! ```text
//! μ ← μ − α Λ^{-1} (E_q[∇L] + (ρ/η) μ)
//! Λ ← (1−β) Λ + β (E_q[∇²L]/ρ + η^{-1} I)
//! ```
//!
//! can be iterated without approximation error. This module is the
//! ground-truth reference against which the TRACER update is validated.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamVector;
use crate::error::{Error, Result};
use crate::models::{Model, QuadraticModel};
use crate::optim::{tracer_step, Damping, FisherState, TracerConfig};

const SYMMETRY_TOL: f64 = 1e-12;

/// Gaussian variational posterior `q = N(μ, Σ)` stored as mean and
/// precision `Λ = Σ^{-1}` (symmetric positive-definite).
#[derive(Debug, Clone)]
pub struct GaussianVariational {
    mu: DVector<f64>,
    lambda: DMatrix<f64>,
}

impl GaussianVariational {
    pub fn new(mu: DVector<f64>, lambda: DMatrix<f64>) -> Result<Self> {
        let p = mu.len();
        if lambda.nrows() != p || lambda.ncols() != p {
            return Err(Error::Shape(format!(
                "precision is {}x{}, mean has length {p}",
                lambda.nrows(),
                lambda.ncols()
            )));
        }
        let mut max_asym: f64 = 0.0;
        for i in 0..p {
            for j in (i + 1)..p {
                max_asym = max_asym.max((lambda[(i, j)] - lambda[(j, i)]).abs());
            }
        }
        if max_asym > SYMMETRY_TOL {
            return Err(Error::invalid(format!(
                "precision asymmetry {max_asym:.3e} exceeds {SYMMETRY_TOL:.0e}"
            )));
        }
        if lambda.clone().cholesky().is_none() {
            return Err(Error::PrecisionNotPd);
        }
        Ok(GaussianVariational { mu, lambda })
    }

    pub fn isotropic(p: usize, precision: f64) -> Result<Self> {
        Self::new(DVector::zeros(p), DMatrix::identity(p, p) * precision)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn lambda(&self) -> &DMatrix<f64> {
        &self.lambda
    }

    /// Covariance `Σ = Λ^{-1}`.
    pub fn sigma(&self) -> DMatrix<f64> {
        self.lambda
            .clone()
            .cholesky()
            .expect("precision verified PD at construction")
            .inverse()
    }

    /// `ln det Σ = −ln det Λ`.
    pub fn log_det_sigma(&self) -> f64 {
        let chol = self.lambda.clone().cholesky().expect("PD");
        let mut ld = 0.0;
        for i in 0..self.dim() {
            ld += chol.l_dirty()[(i, i)].ln();
        }
        -2.0 * ld
    }

    /// Differential entropy `½ ln det Σ + (p/2)(1 + ln 2π)`.
    pub fn entropy(&self) -> f64 {
        let p = self.dim() as f64;
        0.5 * self.log_det_sigma() + 0.5 * p * (1.0 + (2.0 * std::f64::consts::PI).ln())
    }
}

/// Prior variance `η` of the isotropic Gaussian prior `N(0, ηI)`;
/// `Improper` is the `η = ∞` flag that drops every `η^{-1}` term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorVariance {
    Finite(f64),
    Improper,
}

/// Oracle configuration: KL tempering `ρ`, prior variance, and the mean /
/// precision step sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VIConfig {
    pub rho: f64,
    pub eta: PriorVariance,
    pub alpha: f64,
    pub beta: f64,
}

impl VIConfig {
    pub fn new(rho: f64, eta: PriorVariance, alpha: f64, beta: f64) -> Result<Self> {
        let cfg = VIConfig { rho, eta, alpha, beta };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0) {
            return Err(Error::invalid(format!("rho must be > 0, got {}", self.rho)));
        }
        if let PriorVariance::Finite(eta) = self.eta {
            if !(eta > 0.0) {
                return Err(Error::invalid(format!("eta must be > 0, got {eta}")));
            }
        }
        if !(self.alpha > 0.0) {
            return Err(Error::invalid(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::invalid(format!("beta must be in (0,1], got {}", self.beta)));
        }
        Ok(())
    }
}

/// Closed-form Gaussian expectations of a quadratic loss:
/// `E_q[L] = L(μ) + ½Tr(AΣ)`, `E_q[∇L] = Aμ − b`, `E_q[∇²L] = A`.
#[derive(Debug, Clone)]
pub struct QuadExpectations {
    pub e_loss: f64,
    pub e_grad: DVector<f64>,
    pub e_hess: DMatrix<f64>,
}

pub fn gaussian_expectations_quadratic(
    model: &QuadraticModel,
    q: &GaussianVariational,
) -> Result<QuadExpectations> {
    let p = model.dim();
    if q.dim() != p {
        return Err(Error::Length { expected: p, got: q.dim() });
    }
    let a = DMatrix::from_row_slice(p, p, model.hessian());
    let b = DVector::from_column_slice(model.linear());
    let mu = q.mu();
    let sigma = q.sigma();
    let loss_at_mu = 0.5 * (mu.transpose() * &a * mu)[(0, 0)] - b.dot(mu) + model.constant();
    let trace_a_sigma = (&a * &sigma).trace();
    Ok(QuadExpectations {
        e_loss: loss_at_mu + 0.5 * trace_a_sigma,
        e_grad: &a * mu - b,
        e_hess: a,
    })
}

/// `KL(q ‖ N(0, ηI))` in closed form.
pub fn kl_to_isotropic_prior(q: &GaussianVariational, eta: f64) -> f64 {
    let p = q.dim() as f64;
    let sigma = q.sigma();
    0.5 * (sigma.trace() / eta + q.mu().norm_squared() / eta - p + p * eta.ln()
        - q.log_det_sigma())
}

/// KL divergence between Gaussians given as raw `(μ, Λ)` blocks.
///
/// `lambda1` may be slightly asymmetric; the formula
/// `½[Tr(Λ₁Σ₀) + dᵀΛ₁d − p + ln det Λ₀ − ln det Λ₁]` extends smoothly to a
/// full-matrix parameterization, which is what the finite-difference FIM
/// probes differentiate.
pub fn gaussian_kl_raw(
    mu0: &DVector<f64>,
    lambda0: &DMatrix<f64>,
    mu1: &DVector<f64>,
    lambda1: &DMatrix<f64>,
) -> Result<f64> {
    let p = mu0.len() as f64;
    let sigma0 = lambda0
        .clone()
        .cholesky()
        .ok_or(Error::PrecisionNotPd)?
        .inverse();
    let det0 = lambda0.determinant();
    let det1 = lambda1.determinant();
    if det0 <= 0.0 || det1 <= 0.0 {
        return Err(Error::PrecisionNotPd);
    }
    let d = mu1 - mu0;
    let quad = (d.transpose() * lambda1 * &d)[(0, 0)];
    Ok(0.5 * ((lambda1 * sigma0).trace() + quad - p + det0.ln() - det1.ln()))
}

/// Variational objective `E_q[L] + ρ·KL(q, p)`; for the improper prior this
/// is the entropy form `E_q[L] − ρ·H(q)`.
pub fn objective_value(
    model: &QuadraticModel,
    q: &GaussianVariational,
    cfg: &VIConfig,
) -> Result<f64> {
    let exps = gaussian_expectations_quadratic(model, q)?;
    Ok(match cfg.eta {
        PriorVariance::Finite(eta) => exps.e_loss + cfg.rho * kl_to_isotropic_prior(q, eta),
        PriorVariance::Improper => exps.e_loss - cfg.rho * q.entropy(),
    })
}

/// One natural-gradient step on `(μ, Λ)` with the closed-form expectations.
///
/// The precision update is a convex combination of PD matrices whenever `A`
/// is PD, so `Λ` stays in the cone; an indefinite `A` can push it out, which
/// is reported as an error.
pub fn ngd_step(
    model: &QuadraticModel,
    q: &GaussianVariational,
    cfg: &VIConfig,
) -> Result<GaussianVariational> {
    cfg.validate()?;
    let exps = gaussian_expectations_quadratic(model, q)?;
    let p = q.dim();

    let grad_term = match cfg.eta {
        PriorVariance::Finite(eta) => &exps.e_grad + q.mu() * (cfg.rho / eta),
        PriorVariance::Improper => exps.e_grad.clone(),
    };
    let chol = q.lambda().clone().cholesky().ok_or(Error::PrecisionNotPd)?;
    let natural_dir = chol.solve(&grad_term);
    let mu_next = q.mu() - natural_dir * cfg.alpha;

    let mut target = &exps.e_hess / cfg.rho;
    if let PriorVariance::Finite(eta) = cfg.eta {
        for i in 0..p {
            target[(i, i)] += 1.0 / eta;
        }
    }
    let mut lambda_next = q.lambda() * (1.0 - cfg.beta) + target * cfg.beta;
    // Kill round-off asymmetry before the construction check.
    lambda_next = 0.5 * (&lambda_next + lambda_next.transpose());

    GaussianVariational::new(mu_next, lambda_next)
}

/// Analytic Fisher information blocks of `q = N(μ, Λ^{-1})` under the
/// `(μ, vec(Λ))` parameterization.
///
/// The μ-block is `Λ`. The Λ-block is `½ Σ⊗Σ` acting on symmetric
/// directions; entrywise (full vec coordinates, column-major) it is
/// `F[(a,b),(c,d)] = ½ Σ_ad Σ_bc`, the Hessian of `−½ ln det Λ`.
#[derive(Debug, Clone)]
pub struct GaussianFim {
    pub mu_block: DMatrix<f64>,
    pub lambda_block: DMatrix<f64>,
}

pub fn gaussian_fim(q: &GaussianVariational) -> GaussianFim {
    let p = q.dim();
    let sigma = q.sigma();
    let mut lambda_block = DMatrix::zeros(p * p, p * p);
    for a in 0..p {
        for b in 0..p {
            let row = a + p * b;
            for c in 0..p {
                for d in 0..p {
                    let col = c + p * d;
                    lambda_block[(row, col)] = 0.5 * sigma[(a, d)] * sigma[(b, c)];
                }
            }
        }
    }
    GaussianFim { mu_block: q.lambda().clone(), lambda_block }
}

/// Configuration of the oracle-vs-TRACER comparison run.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ConsistencyConfig {
    /// Tempering/penalty strength shared by both sides; `0` selects the
    /// untempered Newton limit (precision tracks the raw Hessian).
    pub rho: f64,
    pub beta: f64,
    pub alpha: f64,
    pub steps: usize,
    /// SGD-TRACER side: learning rate and damping.
    pub tracer_lr: f64,
    pub tracer_delta: f64,
}

/// Side-by-side report of the diagonal-constrained oracle and SGD-TRACER on
/// a diagonal quadratic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub rho: f64,
    pub steps: usize,
    /// `||μ_oracle − w_tracer||₂` per recorded step (absent in Newton mode).
    pub mu_gap: Vec<f64>,
    /// `Tr(A Λ^{-1}) / ρ` at the final oracle iterate; `p` at the fixed point.
    pub oracle_trace_ratio: Option<f64>,
    /// Oracle objective along the iterates (entropy form).
    pub objective_series: Vec<f64>,
    /// Final oracle mean.
    pub oracle_mu: Vec<f64>,
    /// Final TRACER iterate and penalty statistics (absent in Newton mode).
    pub tracer_w: Option<Vec<f64>>,
    pub tracer_penalty_final: Option<f64>,
    /// `penalty / (ρ·p)`; approaches 1 on a constant-gradient-norm plateau.
    pub tracer_penalty_over_rho_p: Option<f64>,
    /// Convention note for the mean update.
    pub note: String,
}

const MEAN_UPDATE_NOTE: &str =
    "mean update uses descent sign with inverse-precision preconditioning";

fn diag_of(model: &QuadraticModel) -> Result<Vec<f64>> {
    let p = model.dim();
    let a = model.hessian();
    for i in 0..p {
        for j in 0..p {
            if i != j && a[i * p + j] != 0.0 {
                return Err(Error::invalid(
                    "tracer_consistency_check requires a diagonal quadratic",
                ));
            }
        }
    }
    Ok((0..p).map(|i| a[i * p + i]).collect())
}

/// Run the diagonal-constrained oracle and SGD-TRACER side by side on a
/// diagonal quadratic (where the diagonal Fisher approximation is exact) and
/// report trajectory discrepancy plus the stationary trace-ratio identities.
pub fn tracer_consistency_check(
    model: &QuadraticModel,
    cfg: &ConsistencyConfig,
) -> Result<ConsistencyReport> {
    let diag = diag_of(model)?;
    let p = model.dim();
    let b = model.linear().to_vec();
    // Fixed nonzero start for both trajectories, away from b = 0 minimizers.
    let start: Vec<f64> = (0..p).map(|i| 1.0 + 0.5 * i as f64).collect();

    if cfg.rho == 0.0 {
        // Untempered limit: Λ tracks the raw Hessian, the mean update is
        // Newton-preconditioned descent (β = α = 1 converges in one step).
        let mut lambda = vec![1.0; p];
        let mut mu = start.clone();
        let mut objective_series = Vec::new();
        for _ in 0..cfg.steps {
            for i in 0..p {
                lambda[i] = (1.0 - cfg.beta) * lambda[i] + cfg.beta * diag[i];
            }
            for i in 0..p {
                let g = diag[i] * mu[i] - b[i];
                mu[i] -= cfg.alpha * g / lambda[i];
            }
            let loss: f64 = (0..p)
                .map(|i| 0.5 * diag[i] * mu[i] * mu[i] - b[i] * mu[i])
                .sum::<f64>()
                + model.constant();
            objective_series.push(loss);
        }
        return Ok(ConsistencyReport {
            rho: 0.0,
            steps: cfg.steps,
            mu_gap: Vec::new(),
            oracle_trace_ratio: None,
            objective_series,
            oracle_mu: mu,
            tracer_w: None,
            tracer_penalty_final: None,
            tracer_penalty_over_rho_p: None,
            note: MEAN_UPDATE_NOTE.to_string(),
        });
    }

    // Diagonal-constrained oracle (η = ∞).
    let mut lambda = vec![1.0; p];
    let mut mu = start.clone();
    // SGD-TRACER side, full-batch on the same quadratic.
    let tracer_cfg = TracerConfig::new(cfg.rho, cfg.beta, Damping::Fixed(cfg.tracer_delta))?;
    let mut fs = FisherState::new(p, cfg.beta, Damping::Fixed(cfg.tracer_delta))?;
    let mut w = ParamVector::new(start);
    let batch = crate::models::DataBatch::classification(vec![0.0], 1, vec![0], 1)?;

    let mut mu_gap = Vec::with_capacity(cfg.steps);
    let mut objective_series = Vec::with_capacity(cfg.steps);
    let mut penalty_final = 0.0;

    for step in 0..cfg.steps {
        for i in 0..p {
            lambda[i] = (1.0 - cfg.beta) * lambda[i] + cfg.beta * diag[i] / cfg.rho;
        }
        for i in 0..p {
            let g = diag[i] * mu[i] - b[i];
            mu[i] -= cfg.alpha * g / lambda[i];
        }
        // Entropy-form objective with diagonal Σ = 1/λ.
        let e_loss: f64 = (0..p)
            .map(|i| 0.5 * diag[i] * (mu[i] * mu[i] + 1.0 / lambda[i]) - b[i] * mu[i])
            .sum::<f64>()
            + model.constant();
        let entropy: f64 = 0.5
            * (0..p).map(|i| (1.0 / lambda[i]).ln()).sum::<f64>()
            + 0.5 * p as f64 * (1.0 + (2.0 * std::f64::consts::PI).ln());
        objective_series.push(e_loss - cfg.rho * entropy);

        w = tracer_step(model, &w, &batch, &mut fs, &tracer_cfg, cfg.tracer_lr, step)?;
        let g_now = model.analytic_gradient(w.as_slice());
        penalty_final = crate::optim::tracer_penalty(&g_now, &fs, cfg.rho)?;

        let gap = mu
            .iter()
            .zip(w.as_slice())
            .map(|(m, wi)| (m - wi) * (m - wi))
            .sum::<f64>()
            .sqrt();
        mu_gap.push(gap);
    }

    let trace_ratio = (0..p).map(|i| diag[i] / lambda[i]).sum::<f64>() / cfg.rho;
    Ok(ConsistencyReport {
        rho: cfg.rho,
        steps: cfg.steps,
        mu_gap,
        oracle_trace_ratio: Some(trace_ratio),
        objective_series,
        oracle_mu: mu,
        tracer_w: Some(w.as_slice().to_vec()),
        tracer_penalty_final: Some(penalty_final),
        tracer_penalty_over_rho_p: Some(penalty_final / (cfg.rho * p as f64)),
        note: MEAN_UPDATE_NOTE.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn random_pd_matrix(p: usize, seed: u64) -> DMatrix<f64> {
        let mut r = crate::rng::stream(seed, "pd", 0);
        let g = DMatrix::from_fn(p, p, |_, _| r.gen_range(-1.0..1.0));
        let q = g.qr().q();
        let eigs = DVector::from_fn(p, |_, _| r.gen_range(0.5..3.0));
        let m = &q * DMatrix::from_diagonal(&eigs) * q.transpose();
        0.5 * (&m + m.transpose())
    }

    #[test]
    fn expectations_tight_precision_limit() {
        // Σ → 0 (huge Λ): E_q[L] → L(μ).
        let model = QuadraticModel::from_diag(&[1.0, 2.0])
            .with_linear(vec![0.3, -0.7])
            .unwrap();
        let mu = DVector::from_vec(vec![0.4, 0.9]);
        let q = GaussianVariational::new(mu.clone(), DMatrix::identity(2, 2) * 1e12).unwrap();
        let exps = gaussian_expectations_quadratic(&model, &q).unwrap();
        let direct = 0.5 * (1.0 * 0.4 * 0.4 + 2.0 * 0.9 * 0.9) - (0.3 * 0.4 - 0.7 * 0.9);
        assert_relative_eq!(exps.e_loss, direct, max_relative = 1e-9);
    }

    #[test]
    fn expectations_identity_case() {
        // A = I (p=2), Σ = I, μ = 0, b = 0, c = 0: E_q[L] = ½Tr(I) = 1.
        let model = QuadraticModel::from_diag(&[1.0, 1.0]);
        let q = GaussianVariational::isotropic(2, 1.0).unwrap();
        let exps = gaussian_expectations_quadratic(&model, &q).unwrap();
        assert_relative_eq!(exps.e_loss, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn expectations_match_monte_carlo() {
        use rand_distr::StandardNormal;
        let p = 3;
        let model = QuadraticModel::random_pd(p, 31, (0.5, 2.5));
        let lambda = random_pd_matrix(p, 32);
        let mu = DVector::from_vec(vec![0.2, -0.5, 0.8]);
        let q = GaussianVariational::new(mu.clone(), lambda).unwrap();
        let exps = gaussian_expectations_quadratic(&model, &q).unwrap();

        // MC oracle: w = μ + chol(Σ) z.
        let sigma = q.sigma();
        let l = sigma.cholesky().unwrap().l();
        let n = 100_000;
        let mut r = crate::rng::stream(33, "mc", 0);
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let z = DVector::from_fn(p, |_, _| r.sample::<f64, _>(StandardNormal));
            let w = &mu + &l * z;
            let a = DMatrix::from_row_slice(p, p, model.hessian());
            let loss = 0.5 * (w.transpose() * &a * &w)[(0, 0)]
                - DVector::from_column_slice(model.linear()).dot(&w)
                + model.constant();
            sum += loss;
            sumsq += loss * loss;
        }
        let mean = sum / n as f64;
        let se = ((sumsq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!(
            (exps.e_loss - mean).abs() <= 4.0 * se,
            "closed form {} vs MC {mean} (se {se})",
            exps.e_loss
        );
    }

    #[test]
    fn objective_zero_kl_at_prior() {
        let model = QuadraticModel::from_diag(&[1.0, 1.0]);
        let eta = 2.5;
        let q = GaussianVariational::isotropic(2, 1.0 / eta).unwrap();
        let kl = kl_to_isotropic_prior(&q, eta);
        assert!(kl.abs() <= 1e-12);
        let cfg = VIConfig::new(0.7, PriorVariance::Finite(eta), 0.5, 0.5).unwrap();
        let exps = gaussian_expectations_quadratic(&model, &q).unwrap();
        let obj = objective_value(&model, &q, &cfg).unwrap();
        assert_relative_eq!(obj, exps.e_loss, max_relative = 1e-12);
    }

    #[test]
    fn one_dimensional_optimum_sigma_squared_equals_rho() {
        // L = ½w², entropy form: objective = ½μ² + ½σ² + ρ·½ ln(1/σ²) + const,
        // minimized at σ² = ρ.
        let model = QuadraticModel::from_diag(&[1.0]);
        let rho = 0.37;
        let cfg = VIConfig::new(rho, PriorVariance::Improper, 0.8, 0.5).unwrap();
        let mut q = GaussianVariational::isotropic(1, 4.0).unwrap();
        for _ in 0..2000 {
            q = ngd_step(&model, &q, &cfg).unwrap();
        }
        let sigma_sq = q.sigma()[(0, 0)];
        assert_relative_eq!(sigma_sq, rho, max_relative = 1e-8);

        // independent calculus check: perturbing σ² raises the objective
        let at = |s2: f64| {
            let qq = GaussianVariational::new(
                q.mu().clone(),
                DMatrix::from_element(1, 1, 1.0 / s2),
            )
            .unwrap();
            objective_value(&model, &qq, &cfg).unwrap()
        };
        assert!(at(rho) < at(rho * 1.05));
        assert!(at(rho) < at(rho * 0.95));
    }

    #[test]
    fn fixed_point_is_stationary() {
        // η = ∞ fixed point: Λ* = A/ρ, μ* = A^{-1}b; one step moves nothing.
        let p = 4;
        let model = QuadraticModel::random_pd(p, 41, (0.8, 3.0));
        let model = model.with_linear(vec![0.3, -0.2, 0.9, 0.1]).unwrap();
        let rho = 0.6;
        let cfg = VIConfig::new(rho, PriorVariance::Improper, 0.7, 0.4).unwrap();
        let a = DMatrix::from_row_slice(p, p, model.hessian());
        let mu_star = DVector::from_vec(model.minimizer().unwrap());
        let lambda_star = &a / rho;
        let q = GaussianVariational::new(mu_star.clone(), lambda_star.clone()).unwrap();
        let q2 = ngd_step(&model, &q, &cfg).unwrap();
        assert!((q2.mu() - &mu_star).norm() <= 1e-12);
        assert!((q2.lambda() - &lambda_star).norm() <= 1e-12);
    }

    #[test]
    fn identity_fixed_point() {
        // A = I, ρ = 1, η = ∞: Λ* = I.
        let model = QuadraticModel::from_diag(&[1.0, 1.0, 1.0]);
        let cfg = VIConfig::new(1.0, PriorVariance::Improper, 0.5, 0.5).unwrap();
        let mut q = GaussianVariational::isotropic(3, 3.0).unwrap();
        for _ in 0..200 {
            q = ngd_step(&model, &q, &cfg).unwrap();
        }
        assert!((q.lambda() - DMatrix::<f64>::identity(3, 3)).norm() <= 1e-10);
    }

    #[test]
    fn beta_zero_is_rejected_and_tiny_beta_freezes_precision() {
        let model = QuadraticModel::from_diag(&[1.0]);
        assert!(VIConfig::new(1.0, PriorVariance::Improper, 0.5, 0.0).is_err());
        // β → 0 limit: the precision update is a convex combination that
        // leaves Λ asymptotically unchanged.
        let cfg = VIConfig::new(1.0, PriorVariance::Improper, 0.5, 1e-12).unwrap();
        let q = GaussianVariational::isotropic(1, 5.0).unwrap();
        let q2 = ngd_step(&model, &q, &cfg).unwrap();
        assert_relative_eq!(q2.lambda()[(0, 0)], 5.0, max_relative = 1e-10);
    }

    #[test]
    fn objective_monotone_from_dominating_start() {
        // Λ₀ ⪰ A/ρ and αρ ≤ 1 keep the natural-gradient iteration monotone.
        let p = 3;
        let model = QuadraticModel::random_pd(p, 43, (0.5, 2.0));
        let model = model.with_linear(vec![0.5, -0.1, 0.2]).unwrap();
        let rho = 0.5;
        let cfg = VIConfig::new(rho, PriorVariance::Improper, 1.0, 0.3).unwrap();
        let mut q = GaussianVariational::isotropic(p, 10.0).unwrap();
        let mut prev = objective_value(&model, &q, &cfg).unwrap();
        for _ in 0..500 {
            q = ngd_step(&model, &q, &cfg).unwrap();
            let cur = objective_value(&model, &q, &cfg).unwrap();
            assert!(cur <= prev + 1e-12, "objective rose: {prev} -> {cur}");
            prev = cur;
        }
    }

    #[test]
    fn indefinite_hessian_leaves_pd_cone() {
        let model = QuadraticModel::new(
            vec![1.0, 0.0, 0.0, -2.0],
            vec![0.0, 0.0],
            0.0,
        )
        .unwrap();
        let cfg = VIConfig::new(0.5, PriorVariance::Improper, 0.5, 1.0).unwrap();
        let q = GaussianVariational::isotropic(2, 1.0).unwrap();
        let err = ngd_step(&model, &q, &cfg).unwrap_err();
        assert!(matches!(err, Error::PrecisionNotPd));
    }

    #[test]
    fn fim_scalar_case() {
        // p=1, σ²=1: F = diag(1, ½).
        let q = GaussianVariational::isotropic(1, 1.0).unwrap();
        let fim = gaussian_fim(&q);
        assert_relative_eq!(fim.mu_block[(0, 0)], 1.0, max_relative = 1e-14);
        assert_relative_eq!(fim.lambda_block[(0, 0)], 0.5, max_relative = 1e-14);
    }

    #[test]
    fn fim_matches_finite_difference_kl_curvature() {
        let p = 2;
        let lambda = random_pd_matrix(p, 44);
        let mu = DVector::from_vec(vec![0.3, -0.6]);
        let q = GaussianVariational::new(mu.clone(), lambda.clone()).unwrap();
        let fim = gaussian_fim(&q);

        let h = 1e-4;
        let kl = |dmu: &DVector<f64>, dlam: &DMatrix<f64>| {
            gaussian_kl_raw(&mu, &lambda, &(&mu + dmu), &(&lambda + dlam)).unwrap()
        };

        // μ-block
        for i in 0..p {
            for j in 0..p {
                let mut ei = DVector::zeros(p);
                ei[i] = h;
                let mut ej = DVector::zeros(p);
                ej[j] = h;
                let zero = DMatrix::zeros(p, p);
                let fd = (kl(&(&ei + &ej), &zero) - kl(&(&ei - &ej), &zero)
                    - kl(&(&ej - &ei), &zero)
                    + kl(&(-&ei - &ej), &zero))
                    / (4.0 * h * h);
                assert_relative_eq!(fim.mu_block[(i, j)], fd, epsilon = 1e-4, max_relative = 1e-4);
            }
        }

        // Λ-block (vec column-major indexing)
        for a in 0..p {
            for b in 0..p {
                for c in 0..p {
                    for d in 0..p {
                        let mut e1 = DMatrix::zeros(p, p);
                        e1[(a, b)] = h;
                        let mut e2 = DMatrix::zeros(p, p);
                        e2[(c, d)] = h;
                        let z = DVector::zeros(p);
                        let fd = (kl(&z, &(&e1 + &e2)) - kl(&z, &(&e1 - &e2))
                            - kl(&z, &(&e2 - &e1))
                            + kl(&z, &(-&e1 - &e2)))
                            / (4.0 * h * h);
                        let analytic = fim.lambda_block[(a + p * b, c + p * d)];
                        assert_relative_eq!(analytic, fd, epsilon = 1e-4, max_relative = 1e-3);
                    }
                }
            }
        }
    }

    #[test]
    fn consistency_newton_mode_converges_in_one_step() {
        let model = QuadraticModel::from_diag(&[2.0, 0.5])
            .with_linear(vec![1.0, 1.0])
            .unwrap();
        let cfg = ConsistencyConfig {
            rho: 0.0,
            beta: 1.0,
            alpha: 1.0,
            steps: 1,
            tracer_lr: 0.1,
            tracer_delta: 1e-8,
        };
        let report = tracer_consistency_check(&model, &cfg).unwrap();
        let w_star = model.minimizer().unwrap();
        for (m, s) in report.oracle_mu.iter().zip(&w_star) {
            assert_relative_eq!(m, s, max_relative = 1e-12);
        }
    }

    #[test]
    fn consistency_trace_ratio_reaches_p() {
        let model = QuadraticModel::from_diag(&[1.0, 1.3])
            .with_linear(vec![0.4, -0.2])
            .unwrap();
        let cfg = ConsistencyConfig {
            rho: 1e-4,
            beta: 0.5,
            alpha: 0.5,
            steps: 400,
            tracer_lr: 1.2,
            tracer_delta: 1e-9,
        };
        let report = tracer_consistency_check(&model, &cfg).unwrap();
        assert_relative_eq!(report.oracle_trace_ratio.unwrap(), 2.0, max_relative = 1e-10);
        assert_eq!(report.note, MEAN_UPDATE_NOTE);
    }

    #[test]
    fn consistency_tracer_penalty_near_rho_p_on_plateau() {
        // α·λ ∈ (1.5, 2) per eigenvalue makes the period-2 gradient cycle
        // attracting with constant |g|, so f̄ → g² elementwise and the
        // penalty approaches ρ·p.
        let model = QuadraticModel::from_diag(&[1.0, 1.1]);
        let cfg = ConsistencyConfig {
            rho: 1e-4,
            beta: 0.999,
            alpha: 0.5,
            steps: 5000,
            tracer_lr: 1.6,
            tracer_delta: 1e-9,
        };
        let report = tracer_consistency_check(&model, &cfg).unwrap();
        let ratio = report.tracer_penalty_over_rho_p.unwrap();
        assert!(
            (ratio - 1.0).abs() <= 0.05,
            "penalty/(rho*p) = {ratio}, expected near 1"
        );
    }

    #[test]
    fn consistency_report_serializes_to_json() {
        let model = QuadraticModel::from_diag(&[1.0, 1.1]);
        let cfg = ConsistencyConfig {
            rho: 1e-4,
            beta: 0.9,
            alpha: 0.5,
            steps: 50,
            tracer_lr: 1.6,
            tracer_delta: 1e-9,
        };
        let report = tracer_consistency_check(&model, &cfg).unwrap();
        let text = serde_json::to_string(&report).unwrap();
        assert!(text.contains("oracle_trace_ratio"));
        let back: ConsistencyReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back.steps, 50);
    }

    #[test]
    fn rejects_non_diagonal_quadratic() {
        let model = QuadraticModel::new(
            vec![1.0, 0.2, 0.2, 1.0],
            vec![0.0, 0.0],
            0.0,
        )
        .unwrap();
        let cfg = ConsistencyConfig {
            rho: 0.1,
            beta: 0.5,
            alpha: 0.5,
            steps: 10,
            tracer_lr: 0.1,
            tracer_delta: 1e-8,
        };
        assert!(tracer_consistency_check(&model, &cfg).is_err());
    }
}
