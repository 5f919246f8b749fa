//! Deterministic k-fold and retrieval splits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest retrieval test set.
pub const RETRIEVAL_TEST_SIZE: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// `k` folds whose sizes differ by at most one.
    KFold(usize),
    /// Holds out `min(1000, 20%)` of the corpus for testing.
    Retrieval,
}

/// Record indices of every fold or of the retrieval train/test partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Splits {
    KFold { seed: u64, folds: Vec<Vec<usize>> },
    Retrieval { seed: u64, train: Vec<usize>, test: Vec<usize> },
}

impl Splits {
    pub fn fold_count(&self) -> usize {
        match self {
            Splits::KFold { folds, .. } => folds.len(),
            Splits::Retrieval { .. } => 1,
        }
    }

    /// `(train, test)` indices of fold `k`: the k-th fold is held out and
    /// the others are concatenated in fold order.
    pub fn fold(&self, k: usize) -> (Vec<usize>, Vec<usize>) {
        match self {
            Splits::KFold { folds, .. } => {
                let train = folds.iter().enumerate().filter(|(i, _)| *i != k).flat_map(|(_, f)| f.iter().copied());
                (train.collect(), folds[k].clone())
            }
            Splits::Retrieval { train, test, .. } => (train.clone(), test.clone()),
        }
    }
}

pub fn retrieval_test_size(n: usize) -> usize {
    RETRIEVAL_TEST_SIZE.min(n / 5)
}

pub fn make_splits(n: usize, mode: SplitMode, seed: u64) -> Result<Splits> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    match mode {
        SplitMode::KFold(k) => {
            if k < 2 {
                return Err(Error::Split(format!("fold count {k} below 2")));
            }
            if n < k {
                return Err(Error::Split(format!("{n} records cannot fill {k} folds")));
            }
            let (base, extra) = (n / k, n % k);
            let mut folds = Vec::with_capacity(k);
            let mut start = 0;
            for i in 0..k {
                let len = base + usize::from(i < extra);
                folds.push(order[start..start + len].to_vec());
                start += len;
            }
            Ok(Splits::KFold { seed, folds })
        }
        SplitMode::Retrieval => {
            let m = retrieval_test_size(n);
            if m == 0 || m == n {
                return Err(Error::Split(format!("{n} records are too few for a retrieval split")));
            }
            let test = order.split_off(n - m);
            Ok(Splits::Retrieval {
                seed,
                train: order,
                test,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hundred_records_ten_folds_of_ten() {
        let s = make_splits(100, SplitMode::KFold(10), 1).unwrap();
        let Splits::KFold { folds, .. } = &s else { panic!() };
        assert!(folds.iter().all(|f| f.len() == 10));
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        let (train, test) = s.fold(3);
        assert_eq!((train.len(), test.len()), (90, 10));
    }

    #[test]
    fn uneven_folds_differ_by_at_most_one() {
        let Splits::KFold { folds, .. } = make_splits(23, SplitMode::KFold(10), 2).unwrap() else { panic!() };
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        assert_eq!(sizes.iter().sum::<usize>(), 23);
    }

    #[test]
    fn retrieval_uses_scaled_rule() {
        let Splits::Retrieval { train, test, .. } = make_splits(50, SplitMode::Retrieval, 0).unwrap() else { panic!() };
        assert_eq!((train.len(), test.len()), (40, 10));
        assert_eq!(retrieval_test_size(100_000), 1000);
    }

    #[test]
    fn same_seed_same_folds() {
        let a = make_splits(30, SplitMode::KFold(3), 11).unwrap();
        assert_eq!(a, make_splits(30, SplitMode::KFold(3), 11).unwrap());
        assert_ne!(a, make_splits(30, SplitMode::KFold(3), 12).unwrap());
    }

    #[test]
    fn too_few_records() {
        assert!(matches!(make_splits(5, SplitMode::KFold(10), 0), Err(Error::Split(_))));
        assert!(matches!(make_splits(4, SplitMode::Retrieval, 0), Err(Error::Split(_))));
    }
}
