//! Curvature-regularized optimization toolkit.
//!
//! The crate bundles:
//!
//! - [`autodiff`]: a minimal reverse-mode tape over flat parameter vectors,
//!   with finite-difference Hessian-vector products.
//! - [`models`]: small differentiable models (analytic quadratics, MLPs with
//!   relu/tanh and cross-entropy or squared error).
//! - [`optim`]: SGD, SGD-momentum, Adam, SAM, SGD-TRACER and Adam-TRACER
//!   behind one step interface.
//! - [`geometry`]: loss-geometry diagnostics (Hutchinson trace, empirical
//!   Fisher diagonals, Laplace evidence, mixture weights, flatness profiles).
//! - [`vi`]: an exact natural-gradient variational-inference oracle on
//!   quadratic losses.
//! - [`harness`]: dataset generation, label-noise injection, seed-controlled
//!   training runs, sweeps, and metric persistence.

pub mod autodiff;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod models;
pub mod optim;
pub mod rng;
pub mod vi;

pub use error::{Error, Result};
