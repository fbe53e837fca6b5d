//! Optimization: Adam, the training loop, the cross-validation driver, and
//! the ablation harness.
//!
//! Everything here is deterministic in (seed, config, dataset): batch order,
//! dropout draws, and optimizer state are all pure functions of the step
//! number, so a run resumed from a checkpoint continues bit-for-bit on the
//! trajectory an uninterrupted run would have taken.

mod ablate;
mod adam;
mod cv;
mod run;

pub use ablate::{run_ablation, AblationCell, AblationGrid, AblationOutcome};
pub use adam::{Adam, AdamHyper};
pub use cv::{audit_leakage, run_cv, CvOutcome};
pub use run::{
    evaluate, load_train_checkpoint, save_train_checkpoint, train, TrainLogLine, TrainOutcome,
};

use crate::data::DataError;
use crate::metrics::MetricsError;
use crate::model::{ModelConfig, ModelError};
use crate::objective::ObjectiveError;
use crate::tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient at step {step} in {param} (norm {norm})")]
    NonFiniteGrad { step: u64, param: String, norm: f64 },
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: u64, loss: f64 },
    #[error("fold {fold}: test users reached training: {users:?}")]
    Leakage { fold: usize, users: Vec<String> },
    #[error("train plan: {0}")]
    Plan(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// The training recipe: a fixed number of optimizer steps — no schedules,
/// no early stopping. Validation scores logged along the way are
/// observational only.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Steps between log lines (and checkpoint writes when a directory is
    /// given).
    pub eval_cadence: u64,
    /// When false, the loss uses uniform instance weights instead of the
    /// class-balance weights.
    pub weighting: bool,
    pub seed: u64,
}

impl TrainPlan {
    /// Recipe defaults for a config: 15000 iterations, batches of 100,
    /// learning rate 1e-4 — 3e-4 for the jointly trained multi-task
    /// variant.
    pub fn for_config(config: &ModelConfig) -> Self {
        TrainPlan {
            iterations: 15000,
            batch_size: 100,
            lr: if config.multi_task { 3e-4 } else { 1e-4 },
            eval_cadence: 500,
            weighting: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Plan("batch_size must be positive".into()));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(TrainError::Plan(format!("lr {} must be positive", self.lr)));
        }
        if self.eval_cadence == 0 {
            return Err(TrainError::Plan("eval_cadence must be positive".into()));
        }
        Ok(())
    }
}
