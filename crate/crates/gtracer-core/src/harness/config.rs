//! Experiment configuration: a single JSON document with every
//! hyperparameter explicit (no silent defaults for ρ, β, δ).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Activation, MlpModel, Model, QuadraticModel};
use crate::optim::OptimizerSpec;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub optimizer: OptimizerSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: ScheduleSpec,
    pub output_dir: PathBuf,
    pub replicate_seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.replicate_seeds.is_empty() {
            return Err(Error::config("replicate_seeds must be non-empty"));
        }
        self.dataset.validate()?;
        self.model.validate()?;
        self.optimizer
            .build(1)
            .map_err(|e| Error::config(format!("optimizer: {e}")))?;
        self.schedule.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Two interleaving half-circles with Gaussian jitter.
    TwoMoons {
        train_size: usize,
        test_size: usize,
        noise: f64,
        flip_fraction: f64,
        seed: u64,
    },
    /// `n_classes` Gaussian clusters on a circle of radius 3.
    GaussianBlobs {
        train_size: usize,
        test_size: usize,
        n_classes: usize,
        noise: f64,
        flip_fraction: f64,
        seed: u64,
    },
    /// Four clusters at (±1, ±1), label = XOR of the coordinate signs.
    Xor {
        train_size: usize,
        test_size: usize,
        noise: f64,
        flip_fraction: f64,
        seed: u64,
    },
    /// IDX-format image/label files (big-endian magic 0x803 / 0x801), with
    /// optional seeded subsampling (0 keeps everything).
    IdxFile {
        images: PathBuf,
        labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        n_classes: usize,
        train_subsample: usize,
        test_subsample: usize,
        flip_fraction: f64,
        seed: u64,
    },
}

impl DatasetSpec {
    pub fn flip_fraction(&self) -> f64 {
        match self {
            DatasetSpec::TwoMoons { flip_fraction, .. }
            | DatasetSpec::GaussianBlobs { flip_fraction, .. }
            | DatasetSpec::Xor { flip_fraction, .. }
            | DatasetSpec::IdxFile { flip_fraction, .. } => *flip_fraction,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            DatasetSpec::TwoMoons { seed, .. }
            | DatasetSpec::GaussianBlobs { seed, .. }
            | DatasetSpec::Xor { seed, .. }
            | DatasetSpec::IdxFile { seed, .. } => *seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let flip = self.flip_fraction();
        if !(0.0..1.0).contains(&flip) {
            return Err(Error::config(format!("flip_fraction must be in [0,1), got {flip}")));
        }
        match self {
            DatasetSpec::TwoMoons { train_size, test_size, noise, .. }
            | DatasetSpec::Xor { train_size, test_size, noise, .. } => {
                if *train_size < 2 || *test_size < 1 {
                    return Err(Error::config("dataset sizes too small"));
                }
                if *noise < 0.0 {
                    return Err(Error::config("noise must be nonnegative"));
                }
            }
            DatasetSpec::GaussianBlobs { train_size, test_size, n_classes, noise, .. } => {
                if *train_size < *n_classes || *test_size < 1 {
                    return Err(Error::config("dataset sizes too small"));
                }
                if *n_classes < 2 {
                    return Err(Error::config("gaussian_blobs needs n_classes >= 2"));
                }
                if *noise < 0.0 {
                    return Err(Error::config("noise must be nonnegative"));
                }
            }
            DatasetSpec::IdxFile { n_classes, .. } => {
                if *n_classes < 2 {
                    return Err(Error::config("idx_file needs n_classes >= 2"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationSpec {
    Relu,
    Tanh,
}

impl From<ActivationSpec> for Activation {
    fn from(a: ActivationSpec) -> Activation {
        match a {
            ActivationSpec::Relu => Activation::Relu,
            ActivationSpec::Tanh => Activation::Tanh,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// MLP classifier; input/output widths come from the dataset.
    Mlp { hidden: Vec<usize>, activation: ActivationSpec },
    /// Multinomial logistic regression (no hidden layers).
    Logistic {},
    /// Analytic quadratic `½wᵀ diag(d) w − bᵀw + c` from the starting point
    /// `w0`; the dataset is ignored by the loss.
    Quadratic { diag: Vec<f64>, b: Vec<f64>, c: f64, w0: Vec<f64> },
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Mlp { hidden, .. } => {
                if hidden.iter().any(|&h| h == 0) {
                    return Err(Error::config("hidden layer sizes must be >= 1"));
                }
            }
            ModelSpec::Logistic {} => {}
            ModelSpec::Quadratic { diag, b, w0, .. } => {
                if diag.is_empty() || b.len() != diag.len() || w0.len() != diag.len() {
                    return Err(Error::config("quadratic diag/b/w0 lengths must match"));
                }
            }
        }
        Ok(())
    }

    pub fn build(&self, input_dim: usize, n_classes: usize) -> Result<Box<dyn Model + Send + Sync>> {
        Ok(match self {
            ModelSpec::Mlp { hidden, activation } => {
                let mut sizes = vec![input_dim];
                sizes.extend_from_slice(hidden);
                sizes.push(n_classes);
                Box::new(MlpModel::new(sizes, (*activation).into())?)
            }
            ModelSpec::Logistic {} => {
                Box::new(MlpModel::new(vec![input_dim, n_classes], Activation::Relu)?)
            }
            ModelSpec::Quadratic { diag, b, c, .. } => {
                let model = QuadraticModel::from_diag(diag)
                    .with_linear(b.clone())?
                    .with_constant(*c);
                Box::new(model)
            }
        })
    }

    /// Initial parameter vector for a given seed.
    pub fn init_params(
        &self,
        input_dim: usize,
        n_classes: usize,
        seed: u64,
    ) -> Result<crate::autodiff::ParamVector> {
        match self {
            ModelSpec::Mlp { hidden, activation } => {
                let mut sizes = vec![input_dim];
                sizes.extend_from_slice(hidden);
                sizes.push(n_classes);
                Ok(MlpModel::new(sizes, (*activation).into())?.init_params(seed))
            }
            ModelSpec::Logistic {} => {
                Ok(MlpModel::new(vec![input_dim, n_classes], Activation::Relu)?.init_params(seed))
            }
            ModelSpec::Quadratic { w0, .. } => Ok(crate::autodiff::ParamVector::new(w0.clone())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSpec {
    Constant { lr0: f64 },
    /// `α_t = α₀ · ½(1 + cos(π t / T))` over total steps `T`.
    Cosine { lr0: f64 },
}

impl ScheduleSpec {
    pub fn lr0(&self) -> f64 {
        match self {
            ScheduleSpec::Constant { lr0 } | ScheduleSpec::Cosine { lr0 } => *lr0,
        }
    }

    pub fn set_lr0(&mut self, v: f64) {
        match self {
            ScheduleSpec::Constant { lr0 } | ScheduleSpec::Cosine { lr0 } => *lr0 = v,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0() > 0.0) || !self.lr0().is_finite() {
            return Err(Error::config(format!("lr0 must be positive, got {}", self.lr0())));
        }
        Ok(())
    }

    pub fn value(&self, step: usize, total_steps: usize) -> f64 {
        match self {
            ScheduleSpec::Constant { lr0 } => *lr0,
            ScheduleSpec::Cosine { lr0 } => {
                let t = step as f64 / total_steps.max(1) as f64;
                lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}
