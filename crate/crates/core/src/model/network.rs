//! The two-branch correspondence network.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::corpus::{Dataset, EncodedCaption, Pair, PretrainedTables, TableKind, Vocab};
use crate::error::{Error, Result};
use crate::nn::{Binding, Mode, ParamStore, StatUpdate};

use super::config::{ArchConfig, CombinerConfig, CombinerMode};
use super::trunks::{
    check_tables, combine_embeddings, head_forward, init_head, init_language, init_vision, language_forward,
    softmax_rows, table_fingerprint, vision_forward, TableSet, LANGUAGE, VISION,
};

/// Name prefix of the fusion head.
pub const FUSION: &str = "fusion";
/// Output index of the "figure and caption correspond" class.
pub const CORRESPOND: usize = 1;
/// Rows per forward pass when evaluating without gradients.
pub const INFER_BATCH: usize = 64;

/// Where visual features come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VisualSource {
    /// The vision branch applied to the figure.
    #[default]
    Network,
    /// The record's precomputed `visual_feature`, bypassing the vision branch.
    Precomputed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Vision,
    Language,
}

impl Branch {
    pub fn prefix(self) -> &'static str {
        match self {
            Branch::Vision => VISION,
            Branch::Language => LANGUAGE,
        }
    }
}

/// Parameter groups held fixed during training. A frozen vision trunk also
/// runs its batch normalization in inference mode, so its running statistics
/// stay untouched.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Freeze {
    pub vision: bool,
    pub language: bool,
}

impl Freeze {
    pub const TRUNKS: Freeze = Freeze {
        vision: true,
        language: true,
    };

    pub fn contains(&self, name: &str) -> bool {
        (self.vision && name.starts_with(VISION)) || (self.language && name.starts_with(LANGUAGE))
    }
}

/// Batch inputs for one forward pass: figures (or their precomputed
/// features) and encoded captions, row-aligned.
#[derive(Debug)]
pub struct Inputs<'d> {
    pub images: Option<Tensor<f32>>,
    pub features: Option<Tensor<f32>>,
    pub captions: Vec<&'d EncodedCaption>,
}

#[derive(Debug)]
pub struct FccForward {
    pub logits: Var,
    pub visual: Var,
    pub text: Var,
    pub combined: Var,
    /// Last vision block's activation before global pooling.
    pub vision_map: Option<Var>,
    pub stats: Vec<StatUpdate>,
}

#[derive(Clone, Debug)]
pub struct FccModel {
    pub arch: ArchConfig,
    pub combiner: CombinerConfig,
    pub visual: VisualSource,
    pub vocab: Vocab,
    pub params: ParamStore,
    tables: TableSet,
    table_fingerprints: Vec<(TableKind, u64)>,
    /// Ids of the records the model has been trained on.
    pub training_ids: BTreeSet<String>,
}

impl FccModel {
    /// Freshly initialized network. The tables required by the combiner
    /// mode must be present with the per-source dimension.
    pub fn new(
        arch: ArchConfig,
        combiner: CombinerConfig,
        vocab: Vocab,
        tables: PretrainedTables,
        seed: u64,
    ) -> Result<Self> {
        check_tables(&combiner, arch.embed_dim, &tables)?;
        let mut model = Self::build(arch, combiner, vocab, seed)?;
        model.table_fingerprints = fingerprints(&model.combiner, &tables);
        model.tables = TableSet::new(tables);
        Ok(model)
    }

    /// Parameters of the right names and shapes, without tables; used when
    /// loading checkpoints.
    pub(crate) fn skeleton(arch: ArchConfig, combiner: CombinerConfig, vocab: Vocab) -> Result<Self> {
        Self::build(arch, combiner, vocab, 0)
    }

    fn build(arch: ArchConfig, combiner: CombinerConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        arch.validate()?;
        combiner.sub_dim(arch.embed_dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        init_vision(&mut params, &arch, &mut rng)?;
        init_language(&mut params, &arch, &combiner, vocab.len(), &mut rng)?;
        init_head(&mut params, FUSION, arch.feature_dim(), arch.fusion_hidden, 2, &mut rng)?;
        Ok(Self {
            arch,
            combiner,
            visual: VisualSource::Network,
            vocab,
            params,
            tables: TableSet::default(),
            table_fingerprints: Vec::new(),
            training_ids: BTreeSet::new(),
        })
    }

    pub fn tables(&self) -> &PretrainedTables {
        self.tables.tables()
    }

    pub(crate) fn table_fingerprints(&self) -> &[(TableKind, u64)] {
        &self.table_fingerprints
    }

    pub(crate) fn set_table_fingerprints(&mut self, fp: Vec<(TableKind, u64)>) {
        self.table_fingerprints = fp;
    }

    /// Registers pretrained tables after loading a checkpoint. Tables must
    /// be the ones the model was built with (same keys and values).
    pub fn attach_tables(&mut self, tables: PretrainedTables) -> Result<()> {
        check_tables(&self.combiner, self.arch.embed_dim, &tables)?;
        let fresh = fingerprints(&self.combiner, &tables);
        if !self.table_fingerprints.is_empty() && fresh != self.table_fingerprints {
            return Err(Error::Config("pretrained tables differ from those the model was trained with".into()));
        }
        self.table_fingerprints = fresh;
        self.tables = TableSet::new(tables);
        Ok(())
    }

    /// Whether every table the combiner mode needs is registered.
    pub fn tables_ready(&self) -> bool {
        self.combiner.mode.pretrained_sources().iter().all(|&k| self.tables.matrix(k).is_some())
    }

    /// Fails with a configuration error unless the model uses `mode`.
    pub fn require_mode(&self, mode: CombinerMode) -> Result<()> {
        if self.combiner.mode != mode {
            return Err(Error::Config(format!(
                "model uses combiner mode {:?}, mode {mode:?} was requested",
                self.combiner.mode
            )));
        }
        Ok(())
    }

    /// Gathers the inputs for `pairs` (figure index, caption index) of `data`.
    pub fn inputs<'d>(&self, data: &'d Dataset, pairs: &[Pair]) -> Result<Inputs<'d>> {
        let figures: Vec<usize> = pairs.iter().map(|p| p.figure).collect();
        let (images, features) = self.visual_inputs(data, &figures)?;
        Ok(Inputs {
            images,
            features,
            captions: pairs.iter().map(|p| &data.captions[p.caption]).collect(),
        })
    }

    pub(crate) fn visual_inputs(
        &self,
        data: &Dataset,
        figures: &[usize],
    ) -> Result<(Option<Tensor<f32>>, Option<Tensor<f32>>)> {
        match self.visual {
            VisualSource::Network => {
                let images = data
                    .images
                    .as_ref()
                    .ok_or_else(|| Error::Config("dataset was loaded without figures".into()))?;
                let rows: Vec<&Tensor<f32>> = figures.iter().map(|&i| &images[i]).collect();
                Ok((Some(Tensor::stack(&rows)?), None))
            }
            VisualSource::Precomputed => Ok((None, Some(precomputed_features(data, figures, self.arch.feature_dim())?))),
        }
    }

    /// Records the full forward pass on `tape`; `mode` selects batch or
    /// running statistics in the vision trunk.
    pub fn forward<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        binding: &Binding,
        inputs: Inputs<'_>,
        mode: Mode,
        freeze: Freeze,
    ) -> Result<FccForward> {
        let (visual, vision_map, stats) = self.visual_forward(tape, binding, inputs.images, inputs.features, mode, freeze)?;
        let combined = combine_embeddings(
            tape,
            &self.params,
            binding,
            &self.arch,
            &self.combiner,
            &self.tables,
            &inputs.captions,
        )?;
        let text = language_forward(tape, &self.params, binding, &self.arch, combined)?;
        let logits = self.fuse(tape, binding, visual, text)?;
        Ok(FccForward {
            logits,
            visual,
            text,
            combined,
            vision_map,
            stats,
        })
    }

    fn visual_forward<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        binding: &Binding,
        images: Option<Tensor<f32>>,
        features: Option<Tensor<f32>>,
        mode: Mode,
        freeze: Freeze,
    ) -> Result<(Var, Option<Var>, Vec<StatUpdate>)> {
        match (self.visual, images, features) {
            (VisualSource::Network, Some(images), _) => {
                let mode = if freeze.vision { Mode::Infer } else { mode };
                let x = tape.leaf(images, false);
                let out = vision_forward(tape, &self.params, binding, &self.arch, x, mode)?;
                Ok((out.features, Some(out.last_map), out.stats))
            }
            (VisualSource::Precomputed, _, Some(features)) => Ok((tape.leaf(features, false), None, Vec::new())),
            (source, ..) => Err(Error::Contract(format!("inputs do not provide what visual source {source:?} needs"))),
        }
    }

    /// Elementwise product of the branch features → dense + ReLU → dense,
    /// yielding 2-way logits.
    pub fn fuse<'a>(&'a self, tape: &mut Tape<'a>, binding: &Binding, visual: Var, text: Var) -> Result<Var> {
        let (vs, ts) = (tape.shape(visual).to_vec(), tape.shape(text).to_vec());
        let f = self.arch.feature_dim();
        if vs.len() != 2 || ts.len() != 2 || vs[1] != f || ts[1] != f {
            return Err(AutodiffError::Dimension {
                op: "fuse",
                axis: 1,
                detail: format!("expects two [N,{f}] inputs, got {vs:?} and {ts:?}"),
            }
            .into());
        }
        let product = tape.mul(visual, text)?;
        head_forward(tape, &self.params, binding, FUSION, product)
    }

    /// Visual features `[N, F]` of `figures` in inference mode (or the
    /// stored features in bypass mode).
    pub fn vision_features(&self, data: &Dataset, figures: &[usize]) -> Result<Tensor<f32>> {
        if self.visual == VisualSource::Precomputed {
            return precomputed_features(data, figures, self.arch.feature_dim());
        }
        infer_rows(figures.len(), self.arch.feature_dim(), |range| {
            let (images, _) = self.visual_inputs(data, &figures[range])?;
            let mut tape = Tape::new();
            let binding = self.params.bind(&mut tape, &|_| true);
            let x = tape.leaf(images.expect("network source yields images"), false);
            let out = vision_forward(&mut tape, &self.params, &binding, &self.arch, x, Mode::Infer)?;
            Ok(tape.value(out.features).clone())
        })
    }

    /// Text features `[N, F]` of `captions`.
    pub fn text_features(&self, data: &Dataset, captions: &[usize]) -> Result<Tensor<f32>> {
        infer_rows(captions.len(), self.arch.feature_dim(), |range| {
            let encoded: Vec<&EncodedCaption> = captions[range].iter().map(|&i| &data.captions[i]).collect();
            let mut tape = Tape::new();
            let binding = self.params.bind(&mut tape, &|_| true);
            let combined = self.combine(&mut tape, &binding, &encoded)?;
            let text = language_forward(&mut tape, &self.params, &binding, &self.arch, combined)?;
            Ok(tape.value(text).clone())
        })
    }

    /// Records the embedding combiner for `captions` on `tape`.
    pub fn combine<'a>(&'a self, tape: &mut Tape<'a>, binding: &Binding, captions: &[&EncodedCaption]) -> Result<Var> {
        combine_embeddings(tape, &self.params, binding, &self.arch, &self.combiner, &self.tables, captions)
    }

    /// Correspondence probabilities `[N, 2]` for row-aligned features.
    pub fn fuse_and_classify(&self, visual: &Tensor<f32>, text: &Tensor<f32>) -> Result<Tensor<f32>> {
        if visual.shape() != text.shape() {
            return Err(AutodiffError::Dimension {
                op: "fuse_and_classify",
                axis: 0,
                detail: format!("{:?} vs {:?}", visual.shape(), text.shape()),
            }
            .into());
        }
        let f = visual.shape().get(1).copied().unwrap_or(0);
        let n = visual.shape()[0];
        infer_rows(n, 2, |range| {
            let slice = |t: &Tensor<f32>| {
                Tensor::new([range.len(), f], t.data()[range.start * f..range.end * f].to_vec())
            };
            let mut tape = Tape::new();
            let binding = self.params.bind(&mut tape, &|_| true);
            let v = tape.leaf(slice(visual)?, false);
            let t = tape.leaf(slice(text)?, false);
            let logits = self.fuse(&mut tape, &binding, v, t)?;
            Ok(softmax_rows(tape.value(logits)))
        })
    }

    /// Correspondence probabilities `[N, 2]` of figure/caption pairs.
    pub fn predict(&self, data: &Dataset, pairs: &[Pair]) -> Result<Tensor<f32>> {
        let figures: Vec<usize> = pairs.iter().map(|p| p.figure).collect();
        let captions: Vec<usize> = pairs.iter().map(|p| p.caption).collect();
        let v = self.vision_features(data, &figures)?;
        let t = self.text_features(data, &captions)?;
        self.fuse_and_classify(&v, &t)
    }
}

fn fingerprints(combiner: &CombinerConfig, tables: &PretrainedTables) -> Vec<(TableKind, u64)> {
    combiner
        .mode
        .pretrained_sources()
        .iter()
        .filter_map(|&k| tables.get(k).map(|t| (k, table_fingerprint(t))))
        .collect()
}

pub(crate) fn precomputed_features(data: &Dataset, figures: &[usize], dim: usize) -> Result<Tensor<f32>> {
    let mut out = Vec::with_capacity(figures.len() * dim);
    for &i in figures {
        let r = &data.records[i];
        let f = r
            .visual_feature
            .as_ref()
            .ok_or_else(|| Error::Config(format!("record {} has no precomputed visual feature", r.id)))?;
        if f.len() != dim {
            return Err(Error::Config(format!(
                "record {}: precomputed feature has {} values, network features have {dim}",
                r.id,
                f.len()
            )));
        }
        out.extend_from_slice(f);
    }
    Ok(Tensor::new([figures.len(), dim], out)?)
}

/// Runs `f` over consecutive row ranges of at most [`INFER_BATCH`] and
/// concatenates the `[rows, width]` results.
pub(crate) fn infer_rows(
    n: usize,
    width: usize,
    f: impl Fn(std::ops::Range<usize>) -> Result<Tensor<f32>>,
) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(n * width);
    let mut start = 0;
    while start < n {
        let end = (start + INFER_BATCH).min(n);
        data.extend_from_slice(f(start..end)?.data());
        start = end;
    }
    if n == 0 {
        return Err(Error::Contract("inference over zero rows".into()));
    }
    Ok(Tensor::new([n, width], data)?)
}

/// Mean negative log probability of the labeled class (1 = correspond).
pub fn fcc_loss(probabilities: &Tensor<f32>, labels: &[bool]) -> Result<f64> {
    let s = probabilities.shape();
    if s.len() != 2 || s[1] != 2 || s[0] != labels.len() || labels.is_empty() {
        return Err(AutodiffError::Dimension {
            op: "fcc_loss",
            axis: 0,
            detail: format!("{:?} probabilities for {} labels", s, labels.len()),
        }
        .into());
    }
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -f64::from(probabilities.data()[2 * i + usize::from(l)]).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

/// Tape loss for training: mean NLL of `targets` under `softmax(logits)`.
pub fn fcc_loss_on_tape(tape: &mut Tape<'_>, logits: Var, targets: &[usize]) -> Result<Var> {
    let lp = tape.log_softmax(logits)?;
    Ok(tape.nll_loss(lp, targets)?)
}
