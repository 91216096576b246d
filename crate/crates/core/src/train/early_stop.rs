use serde::{Deserialize, Serialize};

use super::metrics::MetricsRecord;
use crate::error::Result;

/// Patience counter on a minimized quantity. Only strict improvements count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    /// `None` until the first observation.
    pub best_val_loss: Option<f64>,
    pub best_epoch: usize,
    pub epochs_since_improvement: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_val_loss: None,
            best_epoch: 0,
            epochs_since_improvement: 0,
        }
    }

    /// Records the loss of `epoch` and reports whether it is a new best.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        let improved = self.best_val_loss.is_none_or(|best| loss < best);
        if improved {
            self.best_val_loss = Some(loss);
            self.best_epoch = epoch;
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
        }
        improved
    }

    pub fn should_stop(&self) -> bool {
        self.epochs_since_improvement >= self.patience
    }
}

/// What [`run_fit`] drives: one training epoch, one validation pass, and
/// snapshots of the state worth restoring.
pub trait FitTarget {
    type Snapshot;

    fn train_epoch(&mut self, epoch: usize) -> Result<f64>;

    fn validate(&mut self, epoch: usize) -> Result<MetricsRecord>;

    fn snapshot(&self) -> Self::Snapshot;

    fn restore(&mut self, snapshot: Self::Snapshot);
}

/// Per-epoch results handed to the [`run_fit`] callback.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: MetricsRecord,
    pub improved: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOutcome {
    pub history: Vec<MetricsRecord>,
    pub train_losses: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
    /// Last epoch that ran; 0 if none did.
    pub last_epoch: usize,
    pub stopped_early: bool,
}

/// Resumable position of a fit loop.
#[derive(Clone, Debug, PartialEq)]
pub struct FitProgress<S> {
    /// Epochs already completed.
    pub epoch: usize,
    pub early: EarlyStopping,
    pub best: S,
}

/// Trains epochs `progress.epoch + 1 ..= max_epochs`, validating after each
/// and snapshotting on strict improvement, until the patience counter runs
/// out. The best snapshot is restored before returning. `on_epoch` sees the
/// target after every epoch, before any restore.
pub fn run_fit<F, C>(
    target: &mut F,
    max_epochs: usize,
    progress: FitProgress<F::Snapshot>,
    mut on_epoch: C,
) -> Result<FitOutcome>
where
    F: FitTarget,
    F::Snapshot: Clone,
    C: FnMut(&F, &EpochReport, &EarlyStopping, &F::Snapshot) -> Result<()>,
{
    let FitProgress {
        epoch: start,
        mut early,
        mut best,
    } = progress;
    let mut history = Vec::new();
    let mut train_losses = Vec::new();
    let mut last_epoch = start;
    let mut stopped_early = early.should_stop() && start > 0;
    let mut epoch = start;
    while !stopped_early && epoch < max_epochs {
        epoch += 1;
        let train_loss = target.train_epoch(epoch)?;
        let val = target.validate(epoch)?;
        let improved = early.observe(epoch, val.loss);
        if improved {
            best = target.snapshot();
        }
        log::info!(
            "epoch {epoch}: train loss {train_loss:.6}, val loss {:.6}, val dice {:.4}{}",
            val.loss,
            val.dice,
            if improved { " (best)" } else { "" }
        );
        let report = EpochReport {
            epoch,
            train_loss,
            val: val.clone(),
            improved,
        };
        on_epoch(target, &report, &early, &best)?;
        history.push(val);
        train_losses.push(train_loss);
        last_epoch = epoch;
        stopped_early = early.should_stop();
    }
    target.restore(best);
    Ok(FitOutcome {
        history,
        train_losses,
        best_epoch: early.best_epoch,
        best_val_loss: early.best_val_loss,
        last_epoch,
        stopped_early,
    })
}
