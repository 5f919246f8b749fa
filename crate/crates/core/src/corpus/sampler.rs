//! Balanced positive/negative pair batches.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Training batch size at full scale.
pub const BATCH_SIZE: usize = 32;

/// A figure paired with a caption, both given as record indices. The pair
/// corresponds exactly when both indices name the same record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pair {
    pub figure: usize,
    pub caption: usize,
}

impl Pair {
    pub fn positive(self) -> bool {
        self.figure == self.caption
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairBatch {
    pub pairs: Vec<Pair>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.pairs.iter().filter(|p| p.positive()).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    /// Class targets: 1 for a corresponding pair, 0 otherwise.
    pub fn targets(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| usize::from(p.positive())).collect()
    }
}

/// Seeded epoch generator over a set of record indices. Every epoch shows
/// each record once as a positive and once as the figure of a negative whose
/// caption is drawn uniformly from the other records; positives and
/// negatives alternate, so every even-sized batch is exactly balanced.
#[derive(Clone, Debug)]
pub struct PairSampler {
    records: Vec<usize>,
    batch_size: usize,
    seed: u64,
}

impl PairSampler {
    pub fn new(records: Vec<usize>, batch_size: usize, seed: u64) -> Result<Self> {
        if records.len() < 2 {
            return Err(Error::Sampling(format!(
                "{} record(s): a negative pair needs at least two",
                records.len()
            )));
        }
        if batch_size < 2 {
            return Err(Error::Config(format!("batch size {batch_size} cannot hold a positive and a negative")));
        }
        Ok(Self {
            records,
            batch_size,
            seed,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn records(&self) -> &[usize] {
        &self.records
    }

    /// All pairs of one epoch in presentation order.
    pub fn epoch_pairs(&self, epoch: u64) -> Vec<Pair> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        let mut order = self.records.clone();
        order.shuffle(&mut rng);
        let n = self.records.len();
        let mut pairs = Vec::with_capacity(2 * n);
        for &figure in &order {
            pairs.push(Pair { figure, caption: figure });
            let caption = loop {
                let c = self.records[rng.gen_range(0..n)];
                if c != figure {
                    break c;
                }
            };
            pairs.push(Pair { figure, caption });
        }
        pairs
    }

    pub fn epoch(&self, epoch: u64) -> Vec<PairBatch> {
        self.epoch_pairs(epoch)
            .chunks(self.batch_size)
            .map(|c| PairBatch { pairs: c.to_vec() })
            .collect()
    }
}

/// Sampler over records `0..n`.
pub fn sample_batches(n: usize, seed: u64, batch_size: usize) -> Result<PairSampler> {
    PairSampler::new((0..n).collect(), batch_size, seed)
}
