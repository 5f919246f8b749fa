//! Correspondence training with cross-validation, supervised category
//! classifiers, and the supervised correspondence baselines.

mod baselines;
mod classifier;
mod config;
mod fcc;
mod fit;
mod log;

#[cfg(test)]
mod tests;

pub use baselines::{
    baseline_direct_combination, baseline_supervised_pretrain, direct_combination_accuracy, direct_decision,
    direct_score, pretrained_trunks, DIRECT_THRESHOLD,
};
pub use classifier::{fine_tune, train_supervised_classifier, Classifier, CLASSIFIER_HIDDEN, HEAD};
pub use config::{TrainConfig, DEFAULT_PATIENCE};
pub use fcc::{argmax, correspondence_scores, evaluate_pairs, pair_accuracy, train_fcc, train_fcc_folds, train_split, validation_pairs};
pub use log::{EpochLog, FoldLog, RunLog};
