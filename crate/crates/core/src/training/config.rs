//! Training hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AdamConfig, WeightDecay};

/// Default patience (epochs without validation improvement) before stopping.
pub const DEFAULT_PATIENCE: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub decay: WeightDecay,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub folds: usize,
    /// Stop after this many epochs without a validation-accuracy gain and
    /// keep the best epoch's parameters; `None` trains every epoch.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    /// Correspondence training: Adam at 1e-4 with weight decay 1e-5,
    /// batches of 32, ten folds, 20 epochs.
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            decay: WeightDecay::Coupled,
            batch_size: 32,
            epochs: 20,
            seed: 0,
            folds: 10,
            patience: Some(DEFAULT_PATIENCE),
        }
    }
}

impl TrainConfig {
    /// Caption classification: learning rate 1e-3, batches of 128.
    pub fn caption_classifier() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 0.0,
            batch_size: 128,
            ..Self::default()
        }
    }

    /// Figure classification: learning rate 1e-4, decay 1e-5, batches of 32.
    pub fn figure_classifier() -> Self {
        Self::default()
    }

    pub fn adam(&self) -> AdamConfig {
        let mut a = AdamConfig::new(self.learning_rate, self.weight_decay);
        a.decay = self.decay;
        a
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Validation(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Validation(format!("weight decay must be non-negative, got {}", self.weight_decay)));
        }
        if self.batch_size < 2 {
            return Err(Error::Validation("batch size must be at least 2".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Validation("epochs must be positive".into()));
        }
        if self.folds < 2 {
            return Err(Error::Validation("fold count must be at least 2".into()));
        }
        if self.patience == Some(0) {
            return Err(Error::Validation("patience must be positive".into()));
        }
        Ok(())
    }
}
