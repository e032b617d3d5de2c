//! Splitting, training, fine-tuning and scoring.

mod metrics;
mod optim;
mod split;
mod train;

pub use metrics::{mae, mse, pcl5, MetricsReport, PCL_TOLERANCE_PERCENT};
pub use optim::Adam;
pub use split::{assign_folds, split, FoldScheme, Split, FOLDS};
pub use train::{
    evaluate, finetune, mean_baseline, predict, sample_subset, scratch_on_fraction, train, write_history, EpochStats, FinetuneOutcome,
    TrainOutcome, FINETUNE_FRACTIONS,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Optimizer and loop settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyper {
    pub batch_size: usize,
    pub lr: f64,
    /// Per-epoch multiplicative step-size decay; 1 keeps the rate constant.
    pub lr_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    /// Epochs spent fine-tuning; `None` means a quarter of `epochs`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finetune_epochs: Option<usize>,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr: 1e-4,
            lr_decay: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 20,
            finetune_epochs: None,
            seed: 0,
            shuffle: true,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("train.batch_size must be positive");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("train.lr must be a finite non-negative number");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("train.lr_decay must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("train.adam_eps must be positive");
        }
        if self.epochs == 0 || self.finetune_epochs == Some(0) {
            return bad("epoch counts must be positive");
        }
        Ok(())
    }

    pub fn finetune_epoch_budget(&self) -> usize {
        self.finetune_epochs.unwrap_or((self.epochs / 4).max(1))
    }
}
