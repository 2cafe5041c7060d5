//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite loss; first non-finite value at tape node {node} ({op})")]
    NonFiniteLoss { node: usize, op: &'static str },

    #[error("non-finite parameter update at step {step}")]
    NonFiniteUpdate { step: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("Fisher state not initialized (no gradient observed yet)")]
    FisherUninitialized,

    #[error("not a strict local minimum: Hessian eigenvalue {eigenvalue:.6e} <= {tol:.0e}")]
    NotPositiveDefinite { eigenvalue: f64, tol: f64 },

    #[error("gradient norm {norm:.6e} exceeds mode tolerance {tol:.0e}")]
    NotAtMode { norm: f64, tol: f64 },

    #[error("precision left the PD cone")]
    PrecisionNotPd,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("malformed IDX file at byte {offset}: {reason}")]
    Idx { offset: u64, reason: String },

    #[error("run diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
