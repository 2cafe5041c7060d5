//! Loss-geometry diagnostics: Hutchinson trace estimation, empirical-Fisher
//! diagonals, Laplace log-evidence at local minima, mixture weights over
//! modes, curvature-dominance ratios, and perturbation flatness profiles.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, hvp, HvpRequest, ParamVector};
use crate::error::{Error, Result};
use crate::models::{DataBatch, Model};
use crate::rng;

/// Gradient-norm tolerance below which a point is trusted as a mode.
pub const MODE_GRAD_TOL: f64 = 1e-6;
/// Eigenvalues at or below this are treated as non-positive-definite.
pub const PD_EIG_TOL: f64 = 1e-10;
/// Explicit Hessian assembly (p HVPs + eigendecomposition) is limited to
/// this dimension; above it only trace diagnostics are available.
pub const MAX_EXPLICIT_HESSIAN_DIM: usize = 100;

/// Compensated (Kahan) summation; keeps mixture normalizations accurate for
/// many modes.
fn kahan_sum<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for x in xs {
        let y = x - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Hutchinson estimate of `Tr(H)` with its standard error.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TraceEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub n_probes: usize,
}

/// Mean of `z^T H z` over Rademacher probes `z ∈ {−1,+1}^p`.
///
/// Probe seeds are pre-split from the master seed, so the result is
/// independent of evaluation order.
pub fn hutchinson_trace<F>(
    hvp_fn: F,
    dim: usize,
    n_probes: usize,
    seed: u64,
) -> Result<TraceEstimate>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if n_probes == 0 {
        return Err(Error::invalid("n_probes must be >= 1"));
    }
    let mut samples = Vec::with_capacity(n_probes);
    for k in 0..n_probes {
        let mut r = rng::stream(seed, "hutchinson", k as u64);
        let z: Vec<f64> = (0..dim)
            .map(|_| if r.gen::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let hz = hvp_fn(&z)?;
        if hz.len() != dim {
            return Err(Error::Length { expected: dim, got: hz.len() });
        }
        samples.push(autodiff::dot(&z, &hz));
    }
    let n = n_probes as f64;
    let mean = kahan_sum(samples.iter().copied()) / n;
    let var = if n_probes > 1 {
        kahan_sum(samples.iter().map(|s| (s - mean) * (s - mean))) / (n - 1.0)
    } else {
        0.0
    };
    Ok(TraceEstimate { estimate: mean, std_error: (var / n).sqrt(), n_probes })
}

/// Which empirical-Fisher diagonal to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherMode {
    /// Square of the mean batch gradient (gradient-magnitude form), the
    /// quantity SGD-TRACER smooths online.
    GradientMagnitude,
    /// Mean of per-example squared gradients.
    PerExample,
}

/// Empirical Fisher diagonal of the batch at `w`.
pub fn empirical_fisher_diag<M: Model + ?Sized>(
    model: &M,
    w: &ParamVector,
    batch: &DataBatch,
    mode: FisherMode,
) -> Result<Vec<f64>> {
    match mode {
        FisherMode::GradientMagnitude => {
            let g = autodiff::gradient(model, w, batch)?;
            Ok(g.iter().map(|x| x * x).collect())
        }
        FisherMode::PerExample => {
            let mut acc = vec![0.0; model.dim()];
            for i in 0..batch.n() {
                let sub = batch.select(&[i])?;
                let g = autodiff::gradient(model, w, &sub)?;
                for (a, gi) in acc.iter_mut().zip(&g) {
                    *a += gi * gi;
                }
            }
            let n = batch.n() as f64;
            for a in acc.iter_mut() {
                *a /= n;
            }
            Ok(acc)
        }
    }
}

/// Laplace approximation at a located mode: flat-prior log pseudo-marginal
/// likelihood `log Z = −L(w) + (p/2)·ln 2π − ½·log det H`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LaplaceSummary {
    pub w_k: Vec<f64>,
    pub loss_at_mode: f64,
    pub log_det_h: f64,
    pub dim: usize,
    pub log_z: f64,
}

impl LaplaceSummary {
    /// Assemble a summary from already-known pieces (used for synthetic
    /// modes and mixture computations at large `p`).
    pub fn from_parts(w_k: Vec<f64>, loss_at_mode: f64, log_det_h: f64) -> Self {
        let dim = w_k.len();
        let log_z = -loss_at_mode + 0.5 * dim as f64 * (2.0 * std::f64::consts::PI).ln()
            - 0.5 * log_det_h;
        LaplaceSummary { w_k, loss_at_mode, log_det_h, dim, log_z }
    }
}

/// Assemble the dense symmetric Hessian from `p` HVP calls against the
/// standard basis and symmetrize.
pub fn assemble_hessian<F>(hvp_fn: F, dim: usize) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if dim > MAX_EXPLICIT_HESSIAN_DIM {
        return Err(Error::invalid(format!(
            "explicit Hessian assembly limited to p <= {MAX_EXPLICIT_HESSIAN_DIM}, got {dim}"
        )));
    }
    let mut h = DMatrix::zeros(dim, dim);
    let mut e = vec![0.0; dim];
    for j in 0..dim {
        e[j] = 1.0;
        let col = hvp_fn(&e)?;
        e[j] = 0.0;
        for i in 0..dim {
            h[(i, j)] = col[i];
        }
    }
    Ok(0.5 * (&h + h.transpose()))
}

/// Laplace log-evidence at a mode, with the log-determinant from an explicit
/// eigendecomposition (`p ≤ 100`).
///
/// Errors when the gradient norm exceeds [`MODE_GRAD_TOL`] or any Hessian
/// eigenvalue is at or below [`PD_EIG_TOL`] (not a strict local minimum).
pub fn laplace_log_evidence<F>(
    w: &ParamVector,
    loss_at_mode: f64,
    grad_norm: f64,
    hvp_fn: F,
) -> Result<LaplaceSummary>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if grad_norm > MODE_GRAD_TOL {
        return Err(Error::NotAtMode { norm: grad_norm, tol: MODE_GRAD_TOL });
    }
    let h = assemble_hessian(hvp_fn, w.len())?;
    let eig = h.symmetric_eigen();
    let mut log_det = 0.0;
    for &lam in eig.eigenvalues.iter() {
        if lam <= PD_EIG_TOL {
            return Err(Error::NotPositiveDefinite { eigenvalue: lam, tol: PD_EIG_TOL });
        }
        log_det += lam.ln();
    }
    Ok(LaplaceSummary::from_parts(w.as_slice().to_vec(), loss_at_mode, log_det))
}

/// Normalized mixing coefficients over modes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureWeights {
    pub pi: Vec<f64>,
}

/// `π_k = Z_k / Σ Z_{k'}`, computed in log-space with max subtraction.
pub fn mixture_weights(summaries: &[LaplaceSummary]) -> Result<MixtureWeights> {
    if summaries.is_empty() {
        return Err(Error::invalid("mixture_weights needs at least one mode"));
    }
    let max_lz = summaries
        .iter()
        .map(|s| s.log_z)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = summaries.iter().map(|s| (s.log_z - max_lz).exp()).collect();
    let total = kahan_sum(exps.iter().copied());
    Ok(MixtureWeights { pi: exps.iter().map(|e| e / total).collect() })
}

/// `(1+ε)^p` evaluated in log-space; the factor by which an ε-flattened
/// mode's volume dominates in `p` dimensions.
pub fn curvature_dominance_ratio(epsilon: f64, p: u32) -> Result<f64> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::invalid(format!("epsilon must be in [0,1), got {epsilon}")));
    }
    if p == 0 {
        return Err(Error::invalid("p must be >= 1"));
    }
    Ok((f64::from(p) * epsilon.ln_1p()).exp())
}

/// One radius row of a flatness profile.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FlatnessRow {
    pub sigma: f64,
    /// Monte-Carlo estimate of `E[L(w+σz)] − L(w)` over standard normal `z`.
    pub mc_mean: f64,
    pub mc_std_error: f64,
    /// Second-order prediction `½ σ² Tr(H)` from a Hutchinson estimate.
    pub quadratic_prediction: f64,
}

/// Mean loss increase under isotropic Gaussian parameter perturbations of
/// growing radius, against the second-order `½σ²Tr(H)` prediction.
pub fn perturbation_flatness_profile<M: Model + ?Sized>(
    model: &M,
    w: &ParamVector,
    batch: &DataBatch,
    radii: &[f64],
    n_dirs: usize,
    seed: u64,
) -> Result<Vec<FlatnessRow>> {
    if n_dirs == 0 {
        return Err(Error::invalid("n_dirs must be >= 1"));
    }
    let p = w.len();
    let base = autodiff::loss(model, w, batch)?;
    let hvp_fn = |v: &[f64]| {
        let req = HvpRequest::new(w.clone(), v.to_vec())?;
        hvp(model, &req, batch)
    };
    let trace = hutchinson_trace(hvp_fn, p, n_dirs.max(32), rng::subseed(seed, "trace", 0))?;

    let mut rows = Vec::with_capacity(radii.len());
    for (si, &sigma) in radii.iter().enumerate() {
        let mut samples = Vec::with_capacity(n_dirs);
        for k in 0..n_dirs {
            let mut r = rng::stream(seed, "flatness", (si * n_dirs + k) as u64);
            let mut shifted = w.clone();
            for wi in shifted.as_mut_slice().iter_mut() {
                let z: f64 = r.sample(StandardNormal);
                *wi += sigma * z;
            }
            samples.push(autodiff::loss(model, &shifted, batch)? - base);
        }
        let n = n_dirs as f64;
        let mean = kahan_sum(samples.iter().copied()) / n;
        let var = if n_dirs > 1 {
            kahan_sum(samples.iter().map(|s| (s - mean) * (s - mean))) / (n - 1.0)
        } else {
            0.0
        };
        rows.push(FlatnessRow {
            sigma,
            mc_mean: mean,
            mc_std_error: (var / n).sqrt(),
            quadratic_prediction: 0.5 * sigma * sigma * trace.estimate,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{DataBatch, MlpModel, Activation, QuadraticModel};
    use approx::assert_relative_eq;

    fn dummy_batch() -> DataBatch {
        DataBatch::classification(vec![0.0], 1, vec![0], 1).unwrap()
    }

    fn analytic_hvp(model: &QuadraticModel) -> impl Fn(&[f64]) -> Result<Vec<f64>> + '_ {
        move |v| Ok(model.hessian_vector(v))
    }

    #[test]
    fn hutchinson_identity_is_exact() {
        let p = 17;
        let est = hutchinson_trace(|v| Ok(v.to_vec()), p, 3, 1).unwrap();
        assert_eq!(est.estimate, p as f64);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn hutchinson_converges_on_diagonal() {
        let model = QuadraticModel::from_diag(&[1.0, 2.0, 3.0]);
        let est = hutchinson_trace(analytic_hvp(&model), 3, 10_000, 7).unwrap();
        assert!((est.estimate - 6.0).abs() <= 0.2, "estimate {}", est.estimate);
    }

    #[test]
    fn hutchinson_linearity() {
        let a = QuadraticModel::random_pd(8, 11, (0.5, 3.0));
        let b = QuadraticModel::random_pd(8, 12, (0.5, 3.0));
        let sum_hvp = |v: &[f64]| -> Result<Vec<f64>> {
            let ha = a.hessian_vector(v);
            let hb = b.hessian_vector(v);
            Ok(ha.iter().zip(&hb).map(|(x, y)| x + y).collect())
        };
        let ea = hutchinson_trace(analytic_hvp(&a), 8, 2000, 3).unwrap();
        let eb = hutchinson_trace(analytic_hvp(&b), 8, 2000, 4).unwrap();
        let eab = hutchinson_trace(sum_hvp, 8, 2000, 5).unwrap();
        let se = (ea.std_error.powi(2) + eb.std_error.powi(2) + eab.std_error.powi(2)).sqrt();
        assert!(
            (eab.estimate - ea.estimate - eb.estimate).abs() <= 4.0 * se.max(1e-12),
            "linearity violated"
        );
    }

    #[test]
    fn fisher_single_example_modes_agree() {
        let model = MlpModel::new(vec![2, 2], Activation::Relu).unwrap();
        let w = model.init_params(3);
        let batch = DataBatch::classification(vec![0.4, -1.0], 2, vec![1], 2).unwrap();
        let gm = empirical_fisher_diag(&model, &w, &batch, FisherMode::GradientMagnitude).unwrap();
        let pe = empirical_fisher_diag(&model, &w, &batch, FisherMode::PerExample).unwrap();
        for (a, b) in gm.iter().zip(&pe) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn fisher_cancellation_gap() {
        // Two examples with equal-and-opposite gradients: the
        // gradient-magnitude form vanishes, the per-example form does not.
        let model = MlpModel::new(vec![1, 1], Activation::Relu).unwrap();
        let w = model.flatten(&[(vec![1.0], vec![0.0])]).unwrap();
        let batch =
            DataBatch::regression(vec![1.0, 1.0], 1, vec![2.0, 0.0], 1).unwrap();
        // predictions are 1; residuals are -1 and +1, so example gradients cancel
        let gm = empirical_fisher_diag(&model, &w, &batch, FisherMode::GradientMagnitude).unwrap();
        let pe = empirical_fisher_diag(&model, &w, &batch, FisherMode::PerExample).unwrap();
        assert!(gm[0].abs() <= 1e-24);
        assert!(pe[0] > 0.1);
    }

    #[test]
    fn fisher_jensen_inequality_elementwise() {
        let model = MlpModel::new(vec![3, 2], Activation::Relu).unwrap();
        let w = model.init_params(5);
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        let mut r = crate::rng::stream(21, "data", 0);
        use rand::Rng;
        for i in 0..16 {
            for _ in 0..3 {
                inputs.push(r.gen_range(-1.0..1.0));
            }
            labels.push(i % 2);
        }
        let batch = DataBatch::classification(inputs, 3, labels, 2).unwrap();
        let gm = empirical_fisher_diag(&model, &w, &batch, FisherMode::GradientMagnitude).unwrap();
        let pe = empirical_fisher_diag(&model, &w, &batch, FisherMode::PerExample).unwrap();
        for (a, b) in pe.iter().zip(&gm) {
            assert!(a + 1e-15 >= *b, "Jensen violated: per-example {a} < gm {b}");
        }
    }

    #[test]
    fn laplace_scalar_case() {
        // p=1, H=(1), loss=0: log Z = ½ ln 2π
        let w = ParamVector::zeros(1);
        let s = laplace_log_evidence(&w, 0.0, 0.0, |v| Ok(v.to_vec())).unwrap();
        assert_relative_eq!(s.log_z, 0.918_938_533_204_672_7, max_relative = 1e-12);
    }

    #[test]
    fn laplace_determinant_scaling_identity() {
        for (p, seed) in [(7usize, 17u64), (50, 18)] {
            let model = QuadraticModel::random_pd(p, seed, (0.5, 4.0));
            let w = ParamVector::zeros(p);
            let eps = 0.01;
            let s1 = laplace_log_evidence(&w, 0.3, 0.0, analytic_hvp(&model)).unwrap();
            let scaled_hvp = |v: &[f64]| -> Result<Vec<f64>> {
                Ok(model.hessian_vector(v).iter().map(|x| (1.0 - eps) * x).collect())
            };
            let s2 = laplace_log_evidence(&w, 0.3, 0.0, scaled_hvp).unwrap();
            let expected = -(p as f64 / 2.0) * (1.0 - eps).ln();
            assert_relative_eq!(s2.log_z - s1.log_z, expected, max_relative = 1e-8);
        }
    }

    #[test]
    fn laplace_log_det_matches_eigenvalues_of_diagonal() {
        let diag = [0.5, 1.5, 2.5, 4.0];
        let model = QuadraticModel::from_diag(&diag);
        let w = ParamVector::zeros(4);
        let s = laplace_log_evidence(&w, 0.0, 0.0, analytic_hvp(&model)).unwrap();
        let expected: f64 = diag.iter().map(|d| d.ln()).sum();
        assert_relative_eq!(s.log_det_h, expected, max_relative = 1e-10);
    }

    #[test]
    fn laplace_rejects_non_pd_and_non_mode() {
        let model = QuadraticModel::from_diag(&[1.0, -0.5]);
        let w = ParamVector::zeros(2);
        let err = laplace_log_evidence(&w, 0.0, 0.0, analytic_hvp(&model)).unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite { .. }));

        let pd = QuadraticModel::from_diag(&[1.0, 0.5]);
        let err = laplace_log_evidence(&w, 0.0, 1e-3, analytic_hvp(&pd)).unwrap_err();
        assert!(matches!(err, Error::NotAtMode { .. }));
    }

    #[test]
    fn mixture_single_and_symmetric() {
        let one = LaplaceSummary::from_parts(vec![0.0], 1.0, 0.5);
        let w = mixture_weights(&[one.clone()]).unwrap();
        assert_eq!(w.pi, vec![1.0]);
        let two = mixture_weights(&[one.clone(), one]).unwrap();
        assert_relative_eq!(two.pi[0], 0.5, max_relative = 1e-14);
        assert_relative_eq!(two.pi[1], 0.5, max_relative = 1e-14);
    }

    #[test]
    fn mixture_flatter_mode_dominates() {
        // Modes with H and (1-eps)H: pi2/pi1 = (1-eps)^(-p/2).
        let p = 1000;
        let eps = 0.01f64;
        let log_det = 3.0; // arbitrary base log-determinant
        let m1 = LaplaceSummary::from_parts(vec![0.0; p], 2.0, log_det);
        let m2 =
            LaplaceSummary::from_parts(vec![0.0; p], 2.0, log_det + p as f64 * (1.0 - eps).ln());
        let w = mixture_weights(&[m1, m2]).unwrap();
        let expected = (-(p as f64) / 2.0 * (1.0 - eps).ln()).exp();
        assert_relative_eq!(w.pi[1] / w.pi[0], expected, max_relative = 1e-8);
        assert!(w.pi[1] > w.pi[0]);
    }

    #[test]
    fn mixture_normalization_is_stable_at_scale() {
        // 10^4 modes with log-Z spread of ±10^4.
        let n = 10_000;
        let summaries: Vec<LaplaceSummary> = (0..n)
            .map(|i| {
                let lz = -1e4 + 2e4 * (i as f64) / (n as f64 - 1.0);
                LaplaceSummary { w_k: vec![], loss_at_mode: 0.0, log_det_h: 0.0, dim: 0, log_z: lz }
            })
            .collect();
        let w = mixture_weights(&summaries).unwrap();
        let total: f64 = kahan_sum(w.pi.iter().copied());
        assert!((total - 1.0).abs() <= 1e-12, "sum deviates: {}", (total - 1.0).abs());
        assert!(w.pi.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn dominance_ratio_values() {
        let eps = 0.37;
        assert_relative_eq!(
            curvature_dominance_ratio(eps, 1).unwrap(),
            1.0 + eps,
            max_relative = 1e-14
        );
        // exp(1000 ln 1.01), checked against high-precision evaluation
        assert_relative_eq!(
            curvature_dominance_ratio(0.01, 1000).unwrap(),
            20_959.155_637_813_66,
            max_relative = 1e-6
        );
        assert_eq!(curvature_dominance_ratio(0.0, 12345).unwrap(), 1.0);
        assert!(curvature_dominance_ratio(1.0, 1).is_err());
    }

    #[test]
    fn flatness_profile_matches_quadratic_trace() {
        let diag = [1.0, 2.0, 0.5];
        let model = QuadraticModel::from_diag(&diag);
        let w = ParamVector::zeros(3); // exact minimum: the linear term vanishes
        let radii = [0.0, 0.05, 0.1, 0.2];
        let rows =
            perturbation_flatness_profile(&model, &w, &dummy_batch(), &radii, 400, 13).unwrap();
        let tr: f64 = diag.iter().sum();
        assert_eq!(rows[0].mc_mean, 0.0);
        assert_eq!(rows[0].quadratic_prediction, 0.0);
        for row in &rows[1..] {
            let expected = 0.5 * row.sigma * row.sigma * tr;
            assert!(
                (row.mc_mean - expected).abs() <= 3.0 * row.mc_std_error.max(1e-12),
                "sigma {}: mc {} vs expected {expected} (se {})",
                row.sigma,
                row.mc_mean,
                row.mc_std_error
            );
        }
        // doubling sigma quadruples the second-order prediction
        assert_relative_eq!(
            rows[3].quadratic_prediction,
            4.0 * rows[2].quadratic_prediction,
            max_relative = 1e-12
        );
    }
}
