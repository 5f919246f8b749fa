//! Per-epoch training records.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

/// Loss and accuracy after one epoch. Epoch 0 describes the untrained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldLog {
    pub fold: usize,
    /// Epoch 0 (untrained) followed by one entry per completed epoch.
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub val_accuracy: Option<f64>,
}

impl FoldLog {
    pub fn last(&self) -> &EpochLog {
        self.epochs.last().expect("fold log holds the untrained entry")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub folds: Vec<FoldLog>,
    /// Mean of the folds' validation accuracies.
    pub mean_val_accuracy: Option<f64>,
    /// Fold whose model was returned.
    pub best_fold: usize,
    /// Wall-clock seconds per fold; excluded from [`RunLog::same_metrics`].
    pub wall_clock_secs: Vec<f64>,
}

impl RunLog {
    /// Equality of everything except timing.
    pub fn same_metrics(&self, other: &RunLog) -> bool {
        self.folds == other.folds && self.mean_val_accuracy == other.mean_val_accuracy && self.best_fold == other.best_fold
    }

    /// One JSON object per epoch and fold, then a summary line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        let enc = |v: serde_json::Value| serde_json::to_string(&v).map_err(|e| Error::Format(e.to_string()));
        for f in &self.folds {
            for e in &f.epochs {
                let mut v = serde_json::to_value(e).map_err(|e| Error::Format(e.to_string()))?;
                v["fold"] = f.fold.into();
                let _ = writeln!(out, "{}", enc(v)?);
            }
        }
        let summary = serde_json::json!({
            "summary": true,
            "folds": self.folds.iter().map(|f| serde_json::json!({
                "fold": f.fold, "best_epoch": f.best_epoch, "val_accuracy": f.val_accuracy,
            })).collect::<Vec<_>>(),
            "mean_val_accuracy": self.mean_val_accuracy,
            "best_fold": self.best_fold,
            "wall_clock_secs": self.wall_clock_secs,
        });
        let _ = writeln!(out, "{}", enc(summary)?);
        Ok(out)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()?).map_err(io_err(path))
    }
}
