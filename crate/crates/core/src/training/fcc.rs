//! Correspondence training with k-fold cross-validation.

use std::sync::Arc;
use std::time::Instant;

use crate::autodiff::{Tape, Tensor};
use crate::corpus::{make_splits, Dataset, Pair, PairSampler, SplitMode};
use crate::error::{Error, Result};
use crate::model::{fcc_loss_on_tape, FccModel, Freeze, CORRESPOND};
use crate::nn::{collect_grads, Mode, ParamStore};
use crate::par;

use super::config::TrainConfig;
use super::fit::{fit, BatchResult, Trainable};
use super::log::{FoldLog, RunLog};

/// Stream offset separating validation pair draws from training draws.
const VALIDATION_STREAM: u64 = 0x005e_ed0f_7a11;

/// Number of rows whose argmax over `[N, C]` scores equals the target.
pub(crate) fn count_correct(scores: &Tensor<f32>, targets: &[usize]) -> usize {
    let c = scores.shape()[1];
    scores
        .data()
        .chunks(c)
        .zip(targets)
        .filter(|(row, &t)| argmax(row) == t)
        .count()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

pub(crate) fn pair_targets(pairs: &[Pair]) -> Vec<usize> {
    pairs.iter().map(|p| usize::from(p.positive())).collect()
}

/// Mean negative log-likelihood and accuracy of `model` on `pairs`.
pub fn evaluate_pairs(model: &FccModel, data: &Dataset, pairs: &[Pair]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::Contract("evaluation over zero pairs".into()));
    }
    Ok(loss_and_accuracy(&model.predict(data, pairs)?, pairs))
}

fn loss_and_accuracy(probs: &Tensor<f32>, pairs: &[Pair]) -> (f64, f64) {
    let targets = pair_targets(pairs);
    let loss = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| -f64::from(probs.data()[2 * i + t]).max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / pairs.len() as f64;
    (loss, count_correct(probs, &targets) as f64 / pairs.len() as f64)
}

/// Fraction of `pairs` classified correctly (argmax of the two classes).
pub fn pair_accuracy(model: &FccModel, data: &Dataset, pairs: &[Pair]) -> Result<f64> {
    evaluate_pairs(model, data, pairs).map(|(_, a)| a)
}

impl Trainable for FccModel {
    type Item = Pair;

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn train_batch(&self, data: &Dataset, pairs: &[Pair], freeze: Freeze) -> Result<BatchResult> {
        let targets = pair_targets(pairs);
        let mut tape = Tape::new();
        let binding = self.params.bind(&mut tape, &|n| freeze.contains(n));
        let fwd = self.forward(&mut tape, &binding, self.inputs(data, pairs)?, Mode::Train, freeze)?;
        let loss = fcc_loss_on_tape(&mut tape, fwd.logits, &targets)?;
        let correct = count_correct(tape.value(fwd.logits), &targets);
        let value = f64::from(tape.value(loss).item());
        let grads = collect_grads(&binding, tape.backward(loss)?);
        Ok(BatchResult {
            loss: value,
            correct,
            grads,
            stats: fwd.stats,
        })
    }

    fn evaluate(&self, data: &Dataset, pairs: &[Pair]) -> Result<(f64, f64)> {
        evaluate_pairs(self, data, pairs)
    }

    fn diverged(&self, epoch: usize, cause: String) -> Error {
        Error::Diverged {
            epoch,
            cause,
            last_good: Some(Box::new(self.clone())),
        }
    }
}

/// A model whose trunks are both frozen, trained through branch features
/// computed once per record. Frozen trunks run in inference mode, so this
/// matches training the full network with [`Freeze::TRUNKS`].
#[derive(Clone)]
struct FusionOnly {
    model: FccModel,
    visual: Arc<Tensor<f32>>,
    text: Arc<Tensor<f32>>,
}

impl FusionOnly {
    fn new(model: FccModel, data: &Dataset) -> Result<Self> {
        let all: Vec<usize> = (0..data.len()).collect();
        Ok(Self {
            visual: Arc::new(model.vision_features(data, &all)?),
            text: Arc::new(model.text_features(data, &all)?),
            model,
        })
    }

    fn features(&self, pairs: &[Pair]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let figures: Vec<usize> = pairs.iter().map(|p| p.figure).collect();
        let captions: Vec<usize> = pairs.iter().map(|p| p.caption).collect();
        Ok((gather_rows(&self.visual, &figures)?, gather_rows(&self.text, &captions)?))
    }
}

fn gather_rows(t: &Tensor<f32>, rows: &[usize]) -> Result<Tensor<f32>> {
    let width = t.shape()[1];
    let data = rows.iter().flat_map(|&r| t.row(r).iter().copied()).collect();
    Ok(Tensor::new([rows.len(), width], data)?)
}

impl Trainable for FusionOnly {
    type Item = Pair;

    fn params(&self) -> &ParamStore {
        &self.model.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.model.params
    }

    fn train_batch(&self, _data: &Dataset, pairs: &[Pair], freeze: Freeze) -> Result<BatchResult> {
        let targets = pair_targets(pairs);
        let (visual, text) = self.features(pairs)?;
        let mut tape = Tape::new();
        let binding = self.model.params.bind(&mut tape, &|n| freeze.contains(n));
        let v = tape.leaf(visual, false);
        let t = tape.leaf(text, false);
        let logits = self.model.fuse(&mut tape, &binding, v, t)?;
        let loss = fcc_loss_on_tape(&mut tape, logits, &targets)?;
        let correct = count_correct(tape.value(logits), &targets);
        let value = f64::from(tape.value(loss).item());
        let grads = collect_grads(&binding, tape.backward(loss)?);
        Ok(BatchResult {
            loss: value,
            correct,
            grads,
            stats: Vec::new(),
        })
    }

    fn evaluate(&self, _data: &Dataset, pairs: &[Pair]) -> Result<(f64, f64)> {
        if pairs.is_empty() {
            return Err(Error::Contract("evaluation over zero pairs".into()));
        }
        let (visual, text) = self.features(pairs)?;
        Ok(loss_and_accuracy(&self.model.fuse_and_classify(&visual, &text)?, pairs))
    }

    fn diverged(&self, epoch: usize, cause: String) -> Error {
        self.model.diverged(epoch, cause)
    }
}

/// Balanced validation pairs over `rows`: each record once as a positive
/// and once with another record's caption. `None` below two records.
pub fn validation_pairs(rows: &[usize], seed: u64) -> Result<Option<Vec<Pair>>> {
    if rows.len() < 2 {
        return Ok(None);
    }
    Ok(Some(PairSampler::new(rows.to_vec(), 2, seed ^ VALIDATION_STREAM)?.epoch_pairs(0)))
}

/// Trains a copy of `template` on the pairs of `train` rows, validating on
/// pairs of `val` rows when given. Parameters matched by `freeze` stay fixed.
pub fn train_split(
    data: &Dataset,
    template: &FccModel,
    train: &[usize],
    val: Option<&[usize]>,
    cfg: &TrainConfig,
    freeze: Freeze,
    fold: usize,
) -> Result<(FccModel, FoldLog)> {
    cfg.validate()?;
    let sampler = PairSampler::new(train.to_vec(), cfg.batch_size, cfg.seed)?;
    let val_pairs = match val {
        Some(v) => validation_pairs(v, cfg.seed)?,
        None => None,
    };
    let batches = |e: u64| sampler.epoch(e).into_iter().map(|b| b.pairs).collect();
    let (mut model, log) = if freeze == Freeze::TRUNKS {
        let mut fusion = FusionOnly::new(template.clone(), data)?;
        let log = fit(&mut fusion, data, &batches, val_pairs.as_deref(), cfg, freeze, fold)?;
        (fusion.model, log)
    } else {
        let mut model = template.clone();
        let log = fit(&mut model, data, &batches, val_pairs.as_deref(), cfg, freeze, fold)?;
        (model, log)
    };
    model.training_ids.extend(train.iter().map(|&i| data.records[i].id.clone()));
    Ok((model, log))
}

/// k-fold cross-validated correspondence training. Folds train in parallel
/// from the same initialization; the fold with the best validation accuracy
/// (ties to the lower index) provides the returned model.
pub fn train_fcc(data: &Dataset, template: &FccModel, cfg: &TrainConfig) -> Result<(FccModel, RunLog)> {
    best_fold(train_folds(data, template, cfg, Freeze::default())?)
}

/// [`train_fcc`] keeping every fold's model, in fold order.
pub fn train_fcc_folds(data: &Dataset, template: &FccModel, cfg: &TrainConfig) -> Result<(Vec<FccModel>, RunLog)> {
    train_folds(data, template, cfg, Freeze::default())
}

pub(crate) fn best_fold((mut models, log): (Vec<FccModel>, RunLog)) -> Result<(FccModel, RunLog)> {
    Ok((models.swap_remove(log.best_fold), log))
}

/// [`train_fcc`] with the parameters matched by `freeze` held fixed.
pub(crate) fn train_folds(
    data: &Dataset,
    template: &FccModel,
    cfg: &TrainConfig,
    freeze: Freeze,
) -> Result<(Vec<FccModel>, RunLog)> {
    cfg.validate()?;
    if !template.tables_ready() {
        return Err(Error::Config("the combiner mode's pretrained tables are not registered".into()));
    }
    let splits = make_splits(data.len(), SplitMode::KFold(cfg.folds), cfg.seed)?;
    let results = par::map_range(splits.fold_count(), |k| {
        let start = Instant::now();
        let (train, val) = splits.fold(k);
        let r = train_split(data, template, &train, Some(&val), cfg, freeze, k);
        (r, start.elapsed().as_secs_f64())
    });
    let mut models = Vec::with_capacity(results.len());
    let mut folds = Vec::with_capacity(results.len());
    let mut wall_clock_secs = Vec::with_capacity(results.len());
    for (r, secs) in results {
        let (m, log) = r?;
        models.push(m);
        folds.push(log);
        wall_clock_secs.push(secs);
    }
    let accs: Vec<f64> = folds.iter().filter_map(|f| f.val_accuracy).collect();
    let mean_val_accuracy = (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64);
    let best_fold = folds
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, f)| {
            let v = f.val_accuracy.unwrap_or(f64::NEG_INFINITY);
            if v > bv { (i, v) } else { (bi, bv) }
        })
        .0;
    for f in &folds {
        log::info!(
            "fold {}: best epoch {}, validation accuracy {:?}",
            f.fold,
            f.best_epoch,
            f.val_accuracy
        );
    }
    Ok((
        models,
        RunLog {
            folds,
            mean_val_accuracy,
            best_fold,
            wall_clock_secs,
        },
    ))
}

/// Probability of the "correspond" class for each pair.
pub fn correspondence_scores(model: &FccModel, data: &Dataset, pairs: &[Pair]) -> Result<Vec<f32>> {
    let p = model.predict(data, pairs)?;
    Ok(p.data().chunks(2).map(|r| r[CORRESPOND]).collect())
}
