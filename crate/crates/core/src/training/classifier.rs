//! Supervised category classifiers built on one trunk.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::corpus::{Dataset, EncodedCaption, Vocab};
use crate::error::{Error, Result};
use crate::model::trunks::{
    combine_embeddings, head_forward, init_head, init_language, init_vision, language_forward, softmax_rows,
    vision_forward, TableSet,
};
use crate::model::{ArchConfig, Branch, CombinerConfig, FccModel, Freeze, VisualSource};
use crate::nn::{collect_grads, Binding, Mode, ParamStore, StatUpdate};

use super::config::TrainConfig;
use super::fcc::{argmax, count_correct};
use super::fit::{fit, BatchResult, Trainable};
use super::log::FoldLog;

/// Hidden units of the classification head.
pub const CLASSIFIER_HIDDEN: usize = 128;
/// Name prefix of the classification head.
pub const HEAD: &str = "head";

/// Trunk (vision or language, named as in [`FccModel`]) followed by
/// dense(128) + ReLU + dense(classes) + softmax.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub branch: Branch,
    pub arch: ArchConfig,
    pub combiner: CombinerConfig,
    pub visual: VisualSource,
    pub classes: Vec<String>,
    pub params: ParamStore,
    tables: TableSet,
    pub vocab: Vocab,
    /// Trunk features by dataset row, used while the trunk is frozen.
    feature_cache: Option<Arc<Tensor<f32>>>,
}

impl Classifier {
    /// Fresh classifier whose trunk matches `template`'s architecture,
    /// vocabulary and tables.
    pub fn new(branch: Branch, template: &FccModel, classes: Vec<String>, seed: u64) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::Config(format!(
                "classification needs at least two classes, got {}",
                classes.len()
            )));
        }
        let arch = template.arch.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        match branch {
            Branch::Vision => init_vision(&mut params, &arch, &mut rng)?,
            Branch::Language => init_language(&mut params, &arch, &template.combiner, template.vocab.len(), &mut rng)?,
        }
        init_head(&mut params, HEAD, arch.feature_dim(), CLASSIFIER_HIDDEN, classes.len(), &mut rng)?;
        Ok(Self {
            branch,
            arch,
            combiner: template.combiner,
            visual: template.visual,
            classes,
            params,
            tables: TableSet::new(template.tables().clone()),
            vocab: template.vocab.clone(),
            feature_cache: None,
        })
    }

    /// Replaces the trunk with the identically named parameters of `source`.
    pub fn load_trunk_from(&mut self, source: &ParamStore) -> Result<()> {
        self.params.copy_prefix_from(source, self.branch.prefix())
    }

    /// Class index of every row's label.
    pub fn targets(&self, data: &Dataset, rows: &[usize]) -> Result<Vec<usize>> {
        rows.iter()
            .map(|&i| {
                let r = &data.records[i];
                let label = r
                    .label
                    .as_ref()
                    .ok_or_else(|| Error::Config(format!("record {} has no label", r.id)))?;
                self.classes.iter().position(|c| c == label).ok_or_else(|| {
                    Error::Config(format!(
                        "record {} has label {label:?}, outside the classifier's {} classes",
                        r.id,
                        self.classes.len()
                    ))
                })
            })
            .collect()
    }

    fn trunk_on_tape<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        binding: &Binding,
        data: &Dataset,
        rows: &[usize],
        mode: Mode,
    ) -> Result<(Var, Vec<StatUpdate>)> {
        if let Some(cache) = &self.feature_cache {
            let f = cache.shape()[1];
            let mut d = Vec::with_capacity(rows.len() * f);
            for &i in rows {
                d.extend_from_slice(cache.row(i));
            }
            return Ok((tape.leaf(Tensor::new([rows.len(), f], d)?, false), Vec::new()));
        }
        match (self.branch, self.visual) {
            (Branch::Vision, VisualSource::Precomputed) => {
                let f = crate::model::network_precomputed(data, rows, self.arch.feature_dim())?;
                Ok((tape.leaf(f, false), Vec::new()))
            }
            (Branch::Vision, VisualSource::Network) => {
                let images = data
                    .images
                    .as_ref()
                    .ok_or_else(|| Error::Config("dataset was loaded without figures".into()))?;
                let stacked = Tensor::stack(&rows.iter().map(|&i| &images[i]).collect::<Vec<_>>())?;
                let x = tape.leaf(stacked, false);
                let out = vision_forward(tape, &self.params, binding, &self.arch, x, mode)?;
                Ok((out.features, out.stats))
            }
            (Branch::Language, _) => {
                let captions: Vec<&EncodedCaption> = rows.iter().map(|&i| &data.captions[i]).collect();
                let combined =
                    combine_embeddings(tape, &self.params, binding, &self.arch, &self.combiner, &self.tables, &captions)?;
                Ok((language_forward(tape, &self.params, binding, &self.arch, combined)?, Vec::new()))
            }
        }
    }

    /// Trunk features `[N, F]` in inference mode.
    pub fn trunk_features(&self, data: &Dataset, rows: &[usize]) -> Result<Tensor<f32>> {
        crate::model::network_infer_rows(rows.len(), self.arch.feature_dim(), |range| {
            let mut tape = Tape::new();
            let binding = self.params.bind(&mut tape, &|_| true);
            let (f, _) = self.trunk_on_tape(&mut tape, &binding, data, &rows[range], Mode::Infer)?;
            Ok(tape.value(f).clone())
        })
    }

    /// Class probabilities `[N, classes]`.
    pub fn probabilities(&self, data: &Dataset, rows: &[usize]) -> Result<Tensor<f32>> {
        crate::model::network_infer_rows(rows.len(), self.classes.len(), |range| {
            let mut tape = Tape::new();
            let binding = self.params.bind(&mut tape, &|_| true);
            let (f, _) = self.trunk_on_tape(&mut tape, &binding, data, &rows[range], Mode::Infer)?;
            let logits = head_forward(&mut tape, &self.params, &binding, HEAD, f)?;
            Ok(softmax_rows(tape.value(logits)))
        })
    }

    /// Most probable class per row (ties to the lower index).
    pub fn predict_classes(&self, data: &Dataset, rows: &[usize]) -> Result<Vec<usize>> {
        let p = self.probabilities(data, rows)?;
        Ok((0..rows.len()).map(|i| argmax(p.row(i))).collect())
    }

    pub fn accuracy(&self, data: &Dataset, rows: &[usize]) -> Result<f64> {
        self.evaluate(data, rows).map(|(_, a)| a)
    }
}

impl Trainable for Classifier {
    type Item = usize;

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn train_batch(&self, data: &Dataset, rows: &[usize], freeze: Freeze) -> Result<BatchResult> {
        let targets = self.targets(data, rows)?;
        let mode = if freeze.contains(self.branch.prefix()) { Mode::Infer } else { Mode::Train };
        let mut tape = Tape::new();
        let binding = self.params.bind(&mut tape, &|n| freeze.contains(n));
        let (f, stats) = self.trunk_on_tape(&mut tape, &binding, data, rows, mode)?;
        let logits = head_forward(&mut tape, &self.params, &binding, HEAD, f)?;
        let lp = tape.log_softmax(logits)?;
        let loss = tape.nll_loss(lp, &targets)?;
        let correct = count_correct(tape.value(logits), &targets);
        let value = f64::from(tape.value(loss).item());
        let grads = collect_grads(&binding, tape.backward(loss)?);
        Ok(BatchResult {
            loss: value,
            correct,
            grads,
            stats,
        })
    }

    fn evaluate(&self, data: &Dataset, rows: &[usize]) -> Result<(f64, f64)> {
        if rows.is_empty() {
            return Err(Error::Contract("evaluation over zero rows".into()));
        }
        let targets = self.targets(data, rows)?;
        let p = self.probabilities(data, rows)?;
        let c = self.classes.len();
        let loss = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -f64::from(p.data()[i * c + t]).max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / rows.len() as f64;
        Ok((loss, count_correct(&p, &targets) as f64 / rows.len() as f64))
    }

    fn diverged(&self, epoch: usize, cause: String) -> Error {
        Error::Diverged {
            epoch,
            cause,
            last_good: None,
        }
    }
}

/// Trains `clf` on the labeled `rows`; with `freeze_trunk` only the head
/// learns, on trunk features computed once up front.
pub fn fine_tune(
    clf: &mut Classifier,
    data: &Dataset,
    rows: &[usize],
    val: Option<&[usize]>,
    cfg: &TrainConfig,
    freeze_trunk: bool,
) -> Result<FoldLog> {
    cfg.validate()?;
    clf.targets(data, rows)?;
    let freeze = if freeze_trunk { Freeze::TRUNKS } else { Freeze::default() };
    if freeze_trunk {
        let all: Vec<usize> = (0..data.len()).collect();
        clf.feature_cache = Some(Arc::new(clf.trunk_features(data, &all)?));
    }
    let batches = |epoch: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch);
        let mut order = rows.to_vec();
        order.shuffle(&mut rng);
        order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect()
    };
    let result = fit(clf, data, &batches, val, cfg, freeze, 0);
    clf.feature_cache = None;
    result
}

/// Trains a fresh classifier of `branch` on the category labels of `rows`.
pub fn train_supervised_classifier(
    data: &Dataset,
    rows: &[usize],
    branch: Branch,
    template: &FccModel,
    cfg: &TrainConfig,
) -> Result<(Classifier, FoldLog)> {
    let classes = data.subset(rows).labels()?;
    let mut clf = Classifier::new(branch, template, classes, cfg.seed)?;
    let log = fine_tune(&mut clf, data, rows, None, cfg, false)?;
    Ok((clf, log))
}
