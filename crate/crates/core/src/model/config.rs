//! Architecture and embedding-combiner configuration.

use serde::{Deserialize, Serialize};

use crate::corpus::TableKind;
use crate::error::{Error, Result};

/// Layer sizes of the two branches and the fusion head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    /// Side length of the square input figures.
    pub image_size: usize,
    /// Filters of each conv+conv+pool block; the last block pools globally.
    pub vision_filters: Vec<usize>,
    /// Caption length in tokens.
    pub seq_len: usize,
    /// Dimension of the combined per-token embedding.
    pub embed_dim: usize,
    /// Number of 1-D convolution blocks; the last pools globally.
    pub text_blocks: usize,
    pub text_filters: usize,
    /// Width of the 1-D convolution window and of the intermediate pools.
    pub window: usize,
    pub fusion_hidden: usize,
}

impl ArchConfig {
    /// Full-scale network: 224×224 figures through 64/128/256/512 filters,
    /// 1000-token captions of 300-D embeddings through three 512-filter
    /// blocks, and a 128-unit fusion layer.
    pub fn base() -> Self {
        Self {
            image_size: 224,
            vision_filters: vec![64, 128, 256, 512],
            seq_len: 1000,
            embed_dim: 300,
            text_blocks: 3,
            text_filters: 512,
            window: 5,
            fusion_hidden: 128,
        }
    }

    /// Same topology scaled down for CPU experiments on short synthetic
    /// captions: 32×32 figures, 150-token captions, 30-D embeddings (divisible
    /// by 1, 2 and 3 sources) and 32-D branch features.
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            vision_filters: vec![8, 16, 16, 32],
            seq_len: 150,
            embed_dim: 30,
            text_blocks: 3,
            text_filters: 32,
            window: 5,
            fusion_hidden: 64,
        }
    }

    /// Dimension of both branch outputs.
    pub fn feature_dim(&self) -> usize {
        self.text_filters
    }

    /// Spatial side of each vision block's pre-pool activation.
    pub fn vision_map_sizes(&self) -> Vec<usize> {
        let mut side = self.image_size;
        self.vision_filters
            .iter()
            .map(|_| {
                let s = side;
                side /= 2;
                s
            })
            .collect()
    }

    /// Sequence lengths through the language branch: after each convolution
    /// and after each intermediate pool, ending with the positions entering
    /// the global pool.
    pub fn text_lengths(&self) -> Vec<usize> {
        let mut out = vec![self.seq_len];
        let mut t = self.seq_len;
        for b in 0..self.text_blocks {
            t = t.saturating_sub(self.window - 1);
            out.push(t);
            if b + 1 < self.text_blocks {
                t /= self.window;
                out.push(t);
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vision_filters.is_empty() || self.vision_filters.contains(&0) {
            return fail("vision_filters must be non-empty and positive".into());
        }
        if self.vision_filters.last() != Some(&self.text_filters) {
            return fail(format!(
                "last vision block has {} filters but text features have {}; the fusion product needs equal sizes",
                self.vision_filters.last().unwrap(),
                self.text_filters
            ));
        }
        let pools = self.vision_filters.len() - 1;
        if self.image_size >> pools < 3 || !self.image_size.is_multiple_of(1 << pools) {
            return fail(format!(
                "image_size {} must be divisible by {} and leave at least 3×3 for the last block",
                self.image_size,
                1 << pools
            ));
        }
        if self.text_blocks == 0 || self.window < 2 || self.embed_dim == 0 || self.fusion_hidden == 0 {
            return fail("text_blocks, embed_dim and fusion_hidden must be positive and window at least 2".into());
        }
        if self.text_lengths().last().copied().unwrap_or(0) == 0 {
            return fail(format!("seq_len {} is too short for {} text blocks", self.seq_len, self.text_blocks));
        }
        Ok(())
    }
}

/// Which embeddings feed each token's combined vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CombinerMode {
    /// Learnt word embedding only.
    A,
    /// Learnt word embedding and a pretrained word embedding.
    B,
    /// Learnt word embedding, pretrained lemma and concept embeddings.
    C,
}

impl CombinerMode {
    pub fn pretrained_sources(self) -> &'static [TableKind] {
        match self {
            CombinerMode::A => &[],
            CombinerMode::B => &[TableKind::Word],
            CombinerMode::C => &[TableKind::Lemma, TableKind::Concept],
        }
    }
}

impl std::str::FromStr for CombinerMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(CombinerMode::A),
            "b" => Ok(CombinerMode::B),
            "c" => Ok(CombinerMode::C),
            other => Err(Error::Validation(format!("unknown combiner mode {other:?} (expected a, b or c)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CombineOp {
    /// Sources split the embedding dimension evenly and are concatenated.
    #[default]
    Concat,
    /// Every source has the full dimension and they are summed.
    Add,
}

impl std::str::FromStr for CombineOp {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(CombineOp::Concat),
            "add" => Ok(CombineOp::Add),
            other => Err(Error::Validation(format!("unknown combine op {other:?} (expected concat or add)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CombinerConfig {
    pub mode: CombinerMode,
    pub op: CombineOp,
}

impl CombinerConfig {
    pub fn new(mode: CombinerMode, op: CombineOp) -> Self {
        Self { mode, op }
    }

    pub fn source_count(&self) -> usize {
        1 + self.mode.pretrained_sources().len()
    }

    /// Dimension of every source vector (learnt and pretrained alike) for a
    /// combined embedding of `embed_dim`.
    pub fn sub_dim(&self, embed_dim: usize) -> Result<usize> {
        match self.op {
            CombineOp::Add => Ok(embed_dim),
            CombineOp::Concat => {
                let n = self.source_count();
                if !embed_dim.is_multiple_of(n) {
                    return Err(Error::Config(format!(
                        "embedding dimension {embed_dim} does not split evenly across {n} sources"
                    )));
                }
                Ok(embed_dim / n)
            }
        }
    }
}

impl Default for CombinerConfig {
    fn default() -> Self {
        Self::new(CombinerMode::A, CombineOp::Concat)
    }
}
