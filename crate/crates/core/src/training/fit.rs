//! Generic epoch loop shared by correspondence and classification training.

use crate::autodiff::AutodiffError;
use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::model::Freeze;
use crate::nn::{AdamState, ParamGrads, ParamStore, StatUpdate};

use super::config::TrainConfig;
use super::log::{EpochLog, FoldLog};

/// Outcome of one forward/backward pass over a training batch.
pub(crate) struct BatchResult {
    /// Mean loss over the batch.
    pub loss: f64,
    pub correct: usize,
    pub grads: ParamGrads,
    pub stats: Vec<StatUpdate>,
}

/// A model the epoch loop can optimize.
pub(crate) trait Trainable: Clone {
    type Item: Copy;

    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Training-mode forward and backward pass.
    fn train_batch(&self, data: &Dataset, items: &[Self::Item], freeze: Freeze) -> Result<BatchResult>;
    /// Mean loss and accuracy in inference mode.
    fn evaluate(&self, data: &Dataset, items: &[Self::Item]) -> Result<(f64, f64)>;
    /// The error reported when training produces non-finite values.
    fn diverged(&self, epoch: usize, cause: String) -> Error;
}

/// Appends a trailing single-item batch to its predecessor, since
/// training-mode batch normalization needs at least two rows.
pub(crate) fn merge_singleton<T>(mut batches: Vec<Vec<T>>) -> Vec<Vec<T>> {
    if batches.len() >= 2 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}

fn is_numeric_failure(e: &Error) -> bool {
    matches!(e, Error::Autodiff(AutodiffError::Numeric { .. }) | Error::NonFiniteGradient { .. })
}

/// Trains `model` for `cfg.epochs` epochs over `batches(epoch_index)`,
/// validating on `val` after every epoch. With a patience and validation
/// items, training stops early and the best epoch's parameters are kept.
pub(crate) fn fit<M: Trainable>(
    model: &mut M,
    data: &Dataset,
    batches: &dyn Fn(u64) -> Vec<Vec<M::Item>>,
    val: Option<&[M::Item]>,
    cfg: &TrainConfig,
    freeze: Freeze,
    fold: usize,
) -> Result<FoldLog> {
    let mut adam = AdamState::new(cfg.adam(), model.params());
    let evaluate_val = |m: &M| -> Result<(Option<f64>, Option<f64>)> {
        match val {
            Some(v) if !v.is_empty() => m.evaluate(data, v).map(|(l, a)| (Some(l), Some(a))),
            _ => Ok((None, None)),
        }
    };
    let first: Vec<M::Item> = batches(0).concat();
    let (train_loss, train_accuracy) = model.evaluate(data, &first)?;
    let (val_loss, val_accuracy) = evaluate_val(model)?;
    let mut epochs = vec![EpochLog {
        epoch: 0,
        train_loss,
        train_accuracy,
        val_loss,
        val_accuracy,
    }];
    let mut best: (Option<f64>, usize, Option<ParamStore>) = (val_accuracy, 0, None);
    let early_stop = cfg.patience.filter(|_| val_accuracy.is_some());

    for epoch in 1..=cfg.epochs {
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for batch in merge_singleton(batches(epoch as u64 - 1)) {
            let wrap = |m: &M, e: Error| if is_numeric_failure(&e) { m.diverged(epoch, e.to_string()) } else { e };
            let r = model.train_batch(data, &batch, freeze).map_err(|e| wrap(model, e))?;
            if !r.loss.is_finite() {
                return Err(model.diverged(epoch, format!("loss {}", r.loss)));
            }
            adam.step(model.params_mut(), &r.grads).map_err(|e| wrap(model, e))?;
            for s in &r.stats {
                s.apply(model.params_mut())?;
            }
            loss_sum += r.loss * batch.len() as f64;
            correct += r.correct;
            seen += batch.len();
        }
        let (val_loss, val_accuracy) = evaluate_val(model)?;
        epochs.push(EpochLog {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_accuracy: correct as f64 / seen as f64,
            val_loss,
            val_accuracy,
        });
        if let Some(patience) = early_stop {
            if val_accuracy > best.0 {
                best = (val_accuracy, epoch, Some(model.params().clone()));
            } else if epoch - best.1 >= patience {
                log::info!("fold {fold}: no validation gain for {patience} epochs, stopping at epoch {epoch}");
                break;
            }
        }
    }
    // Keep the best epoch's parameters; when no epoch beat the untrained
    // model, the last epoch is kept.
    let (best_epoch, val_accuracy) = match best {
        (acc, e, Some(params)) if early_stop.is_some() => {
            *model.params_mut() = params;
            (e, acc)
        }
        _ => {
            let last = epochs.last().expect("untrained entry present");
            (last.epoch, last.val_accuracy)
        }
    };
    Ok(FoldLog {
        fold,
        epochs,
        best_epoch,
        val_accuracy,
    })
}
