//! Branch builders shared by the correspondence model and the supervised
//! classifiers: parameter initialization and tape forward passes of the
//! vision trunk, the embedding combiner with the language trunk, and the
//! two-layer dense heads.
//!
//! Parameter names are shared by every model that contains a trunk
//! (`vision.*`, `language.*`), so trunks can be copied between models.

use rand::Rng;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::corpus::{EmbeddingTable, EncodedCaption, PretrainedTables, TableKind};
use crate::error::{Error, Result};
use crate::nn::{
    bind_affine, bind_conv_block_2d, conv_block_1d, conv_block_2d, dense, init_conv1d, init_conv_block_2d,
    init_dense, init_embedding, Binding, Mode, ParamStore, Pool1d, Pool2d, StatUpdate,
};

use super::config::{ArchConfig, CombineOp, CombinerConfig};

pub const VISION: &str = "vision.";
pub const LANGUAGE: &str = "language.";
pub const EMBEDDING: &str = "language.embedding";

/// Pretrained tables with their padded lookup matrices.
#[derive(Clone, Debug, Default)]
pub struct TableSet {
    tables: PretrainedTables,
    matrices: Vec<(TableKind, Tensor<f32>)>,
}

impl TableSet {
    pub fn new(tables: PretrainedTables) -> Self {
        let matrices = [TableKind::Word, TableKind::Lemma, TableKind::Concept]
            .into_iter()
            .filter_map(|k| tables.get(k).map(|t| (k, t.to_matrix())))
            .collect();
        Self { tables, matrices }
    }

    pub fn tables(&self) -> &PretrainedTables {
        &self.tables
    }

    pub fn matrix(&self, kind: TableKind) -> Option<&Tensor<f32>> {
        self.matrices.iter().find(|(k, _)| *k == kind).map(|(_, m)| m)
    }
}

/// FNV-1a over keys and value bits; identifies a table in checkpoints.
pub fn table_fingerprint(table: &EmbeddingTable) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |bytes: &[u8]| {
        for b in bytes {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for key in table.keys() {
        feed(key.as_bytes());
        feed(&[0]);
        for v in table.lookup(key) {
            feed(&v.to_bits().to_le_bytes());
        }
    }
    h
}

/// Checks that every table the combiner mode needs is registered with the
/// per-source dimension.
pub fn check_tables(combiner: &CombinerConfig, embed_dim: usize, tables: &PretrainedTables) -> Result<()> {
    let sub = combiner.sub_dim(embed_dim)?;
    for &kind in combiner.mode.pretrained_sources() {
        let table = tables.get(kind).ok_or_else(|| {
            Error::Config(format!("combiner mode {:?} needs a {kind:?} embedding table", combiner.mode))
        })?;
        if table.dim() != sub {
            return Err(Error::Config(format!(
                "{kind:?} table has dimension {}, combiner mode {:?} with {:?} needs {sub}",
                table.dim(),
                combiner.mode,
                combiner.op
            )));
        }
    }
    Ok(())
}

pub fn init_vision<R: Rng>(store: &mut ParamStore, arch: &ArchConfig, rng: &mut R) -> Result<()> {
    let mut channels = 3;
    for (b, &filters) in arch.vision_filters.iter().enumerate() {
        init_conv_block_2d(store, &format!("vision.block{b}"), channels, filters, rng)?;
        channels = filters;
    }
    Ok(())
}

pub fn init_language<R: Rng>(
    store: &mut ParamStore,
    arch: &ArchConfig,
    combiner: &CombinerConfig,
    vocab_len: usize,
    rng: &mut R,
) -> Result<()> {
    init_embedding(store, EMBEDDING, vocab_len, combiner.sub_dim(arch.embed_dim)?, rng)?;
    let mut depth = arch.embed_dim;
    for b in 0..arch.text_blocks {
        init_conv1d(store, &format!("language.block{b}"), depth, arch.text_filters, arch.window, rng)?;
        depth = arch.text_filters;
    }
    Ok(())
}

/// Dense(inputs → hidden) + ReLU + dense(hidden → outputs) under `prefix`.
pub fn init_head<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    inputs: usize,
    hidden: usize,
    outputs: usize,
    rng: &mut R,
) -> Result<()> {
    init_dense(store, &format!("{prefix}.dense0"), inputs, hidden, rng)?;
    init_dense(store, &format!("{prefix}.dense1"), hidden, outputs, rng)
}

pub fn head_forward(tape: &mut Tape<'_>, store: &ParamStore, binding: &Binding, prefix: &str, x: Var) -> Result<Var> {
    let h = dense(tape, x, bind_affine(store, binding, &format!("{prefix}.dense0"))?)?;
    let h = tape.relu(h)?;
    Ok(dense(tape, h, bind_affine(store, binding, &format!("{prefix}.dense1"))?)?)
}

#[derive(Debug)]
pub struct VisionOutput {
    /// `[N, F]` pooled features.
    pub features: Var,
    /// Pre-pool activation of every block, in order.
    pub block_maps: Vec<Var>,
    /// `[N, F, s, s]` activation of the last block before global pooling.
    pub last_map: Var,
    pub stats: Vec<StatUpdate>,
}

/// `[N, 3, S, S]` figures → `[N, F]` features.
pub fn vision_forward(
    tape: &mut Tape<'_>,
    store: &ParamStore,
    binding: &Binding,
    arch: &ArchConfig,
    images: Var,
    mode: Mode,
) -> Result<VisionOutput> {
    let shape = tape.shape(images).to_vec();
    let expected = [3, arch.image_size, arch.image_size];
    if shape.len() != 4 || shape[1..] != expected {
        let axis = if shape.len() != 4 { 0 } else { 1 + shape[1..].iter().zip(&expected).position(|(a, b)| a != b).unwrap_or(0) };
        return Err(AutodiffError::Dimension {
            op: "vision_forward",
            axis,
            detail: format!("expects [N,3,{0},{0}], got {shape:?}", arch.image_size),
        }
        .into());
    }
    let blocks = arch.vision_filters.len();
    let mut h = images;
    let mut stats = Vec::new();
    let mut block_maps = Vec::with_capacity(blocks);
    for b in 0..blocks {
        let prefix = format!("vision.block{b}");
        let refs = bind_conv_block_2d(store, binding, &prefix)?;
        let pool = if b + 1 == blocks { Pool2d::Global } else { Pool2d::Halve };
        let out = conv_block_2d(tape, h, &refs, mode, pool)?;
        for (i, s) in out.stats.into_iter().enumerate() {
            stats.push(StatUpdate {
                prefix: format!("{prefix}.bn{i}"),
                stats: s,
            });
        }
        h = out.output;
        block_maps.push(out.pre_pool);
    }
    Ok(VisionOutput {
        features: h,
        last_map: *block_maps.last().expect("at least one block"),
        block_maps,
        stats,
    })
}

/// Per-token combined embeddings `[N, L, embed_dim]`. Only the learnt
/// sub-embedding receives gradients; pretrained tables enter as constants.
pub fn combine_embeddings<'a>(
    tape: &mut Tape<'a>,
    store: &ParamStore,
    binding: &Binding,
    arch: &ArchConfig,
    combiner: &CombinerConfig,
    tables: &'a TableSet,
    captions: &[&EncodedCaption],
) -> Result<Var> {
    let n = captions.len();
    let len = arch.seq_len;
    if let Some(bad) = captions.iter().find(|c| c.tokens.len() != len) {
        return Err(AutodiffError::Dimension {
            op: "combine_embeddings",
            axis: 1,
            detail: format!("caption encoded to {} positions, network expects {len}", bad.tokens.len()),
        }
        .into());
    }
    let gather = |f: &dyn Fn(&EncodedCaption) -> Option<&Vec<usize>>, kind: TableKind| -> Result<Vec<usize>> {
        let mut ids = Vec::with_capacity(n * len);
        for c in captions {
            ids.extend_from_slice(f(c).ok_or_else(|| {
                Error::Config(format!("caption was encoded without the {kind:?} table"))
            })?);
        }
        Ok(ids)
    };
    let token_ids: Vec<usize> = captions.iter().flat_map(|c| c.tokens.iter().copied()).collect();
    let learnt = tape.embedding(binding.var(store, EMBEDDING)?, &token_ids, &[n, len])?;
    let mut parts = vec![learnt];
    for &kind in combiner.mode.pretrained_sources() {
        let matrix = tables
            .matrix(kind)
            .ok_or_else(|| Error::Config(format!("combiner mode {:?} needs a {kind:?} table", combiner.mode)))?;
        let ids = match kind {
            TableKind::Word => gather(&|c| c.words.as_ref(), kind)?,
            TableKind::Lemma => gather(&|c| c.lemmas.as_ref(), kind)?,
            TableKind::Concept => gather(&|c| c.concepts.as_ref(), kind)?,
        };
        let table = tape.leaf_ref(matrix, false);
        parts.push(tape.embedding(table, &ids, &[n, len])?);
    }
    let combined = match combiner.op {
        CombineOp::Concat if parts.len() == 1 => parts[0],
        CombineOp::Concat => tape.concat(&parts, 2)?,
        CombineOp::Add => {
            let mut acc = parts[0];
            for &p in &parts[1..] {
                acc = tape.add(acc, p)?;
            }
            acc
        }
    };
    Ok(combined)
}

#[derive(Debug)]
pub struct TextOutput {
    /// `[N, F]` pooled features.
    pub features: Var,
    /// Every intermediate activation in order: each block's convolution
    /// output followed by its pool output (the final global pool excluded).
    pub trace: Vec<Var>,
}

/// `[N, seq_len, embed_dim]` → `[N, text_filters]`.
pub fn language_forward(
    tape: &mut Tape<'_>,
    store: &ParamStore,
    binding: &Binding,
    arch: &ArchConfig,
    combined: Var,
) -> Result<Var> {
    Ok(language_trace(tape, store, binding, arch, combined)?.features)
}

pub fn language_trace(
    tape: &mut Tape<'_>,
    store: &ParamStore,
    binding: &Binding,
    arch: &ArchConfig,
    combined: Var,
) -> Result<TextOutput> {
    let shape = tape.shape(combined).to_vec();
    if shape.len() != 3 || shape[1] != arch.seq_len || shape[2] != arch.embed_dim {
        let axis = if shape.len() == 3 && shape[1] == arch.seq_len { 2 } else { 1 };
        return Err(AutodiffError::Dimension {
            op: "language_forward",
            axis,
            detail: format!("expects [N,{},{}], got {shape:?}", arch.seq_len, arch.embed_dim),
        }
        .into());
    }
    let mut h = combined;
    let mut trace = Vec::new();
    for b in 0..arch.text_blocks {
        let conv = bind_affine(store, binding, &format!("language.block{b}"))?;
        let last = b + 1 == arch.text_blocks;
        let pool = if last { Pool1d::Global } else { Pool1d::Window(arch.window) };
        let out = conv_block_1d(tape, h, conv, pool)?;
        trace.push(out.pre_pool);
        if !last {
            trace.push(out.output);
        }
        h = out.output;
    }
    Ok(TextOutput { features: h, trace })
}

/// Row-wise softmax computed in `f64`, so each row sums to 1 within `f32`
/// rounding.
pub fn softmax_rows(logits: &Tensor<f32>) -> Tensor<f32> {
    let classes = *logits.shape().last().expect("logits have a class axis");
    let mut out = Vec::with_capacity(logits.numel());
    for row in logits.data().chunks(classes) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(f64::from(v)));
        let exps: Vec<f64> = row.iter().map(|&v| (f64::from(v) - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| (e / z) as f32));
    }
    Tensor::new(logits.shape().to_vec(), out).expect("same shape as logits")
}
