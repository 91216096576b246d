//! Dice loss and metrics, Adadelta, early stopping, the training loop, and
//! the checkpoint format.

mod checkpoint;
mod early_stop;
mod loss;
mod metrics;
mod optim;
mod trainer;

pub use checkpoint::{
    append_history, read_history, Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use early_stop::{run_fit, EarlyStopping, EpochReport, FitOutcome, FitProgress, FitTarget};
pub use loss::dice_loss;
pub use metrics::{binarize, dice_coefficient, iou, per_image_scores, ImageScore, MetricsRecord};
pub use optim::{adadelta_update, AdadeltaParams, AdadeltaState};
pub use trainer::{FitResult, FitSession, SegmentationTrainer};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub threshold: f64,
    pub dice_smooth: f64,
    pub adadelta_rho: f64,
    pub adadelta_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 16,
            max_epochs: 100,
            early_stop_patience: 10,
            threshold: 0.5,
            dice_smooth: 1e-6,
            adadelta_rho: 0.95,
            adadelta_eps: 1e-6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// A zero learning rate and zero epochs are accepted; both are useful
    /// for dry runs.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.early_stop_patience == 0 {
            return fail("early_stop_patience must be positive".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return fail(format!(
                "threshold must lie in (0,1), got {}",
                self.threshold
            ));
        }
        if !(self.dice_smooth >= 0.0 && self.dice_smooth.is_finite()) {
            return fail(format!(
                "dice_smooth must be non-negative, got {}",
                self.dice_smooth
            ));
        }
        if !(self.adadelta_rho > 0.0 && self.adadelta_rho < 1.0) {
            return fail(format!(
                "adadelta_rho must lie in (0,1), got {}",
                self.adadelta_rho
            ));
        }
        if !(self.adadelta_eps > 0.0) {
            return fail(format!(
                "adadelta_eps must be positive, got {}",
                self.adadelta_eps
            ));
        }
        Ok(())
    }

    pub fn adadelta(&self) -> AdadeltaParams {
        AdadeltaParams {
            lr: self.learning_rate,
            rho: self.adadelta_rho,
            eps: self.adadelta_eps,
        }
    }
}
