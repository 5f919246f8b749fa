//! Bidirectional figure/caption retrieval measured in recall at k.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::corpus::Dataset;
use crate::error::{io_err, Error, Result};
use crate::model::{FccModel, CORRESPOND};
use crate::par;

use super::report::EvalReport;

/// Cut-offs reported by default.
pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

/// How a caption/figure candidate pair is scored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scorer {
    /// Probability of the "correspond" class from the fusion layers.
    #[default]
    Correspondence,
    /// Dot product of the visual and text feature vectors.
    DotProduct,
}

impl std::str::FromStr for Scorer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "correspondence" | "probability" => Ok(Scorer::Correspondence),
            "dot" | "dot-product" => Ok(Scorer::DotProduct),
            other => Err(Error::Validation(format!(
                "unknown scorer {other:?} (expected correspondence or dot-product)"
            ))),
        }
    }
}

/// Recall at each k in both directions, with the rank (0 = first) of the
/// true match for every query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub ks: Vec<usize>,
    pub caption_to_figure: Vec<f64>,
    pub figure_to_caption: Vec<f64>,
    pub caption_ranks: Vec<usize>,
    pub figure_ranks: Vec<usize>,
}

impl Retrieval {
    pub fn size(&self) -> usize {
        self.caption_ranks.len()
    }

    pub fn report(&self, split: impl Into<String>) -> EvalReport {
        let mut r = EvalReport::new("retrieval", split);
        for (i, &k) in self.ks.iter().enumerate() {
            r.insert(format!("caption_to_figure/R{k}"), self.caption_to_figure[i]);
            r.insert(format!("figure_to_caption/R{k}"), self.figure_to_caption[i]);
        }
        r.insert("test_size", self.size() as f64);
        r
    }

    /// Recalls lie in [0, 1] and never decrease with k.
    pub fn is_consistent(&self) -> bool {
        let ok = |r: &[f64]| r.iter().all(|v| (0.0..=1.0).contains(v)) && r.windows(2).all(|w| w[0] <= w[1]);
        let sorted = self.ks.windows(2).all(|w| w[0] < w[1]);
        sorted && ok(&self.caption_to_figure) && ok(&self.figure_to_caption)
    }

    /// `direction,query_id,rank` rows, ranks counted from 1.
    pub fn ranks_csv(&self, ids: &[String]) -> String {
        let mut out = String::from("direction,query,rank\n");
        for (name, ranks) in [("caption_to_figure", &self.caption_ranks), ("figure_to_caption", &self.figure_ranks)] {
            for (id, r) in ids.iter().zip(ranks) {
                let _ = writeln!(out, "{name},{id},{}", r + 1);
            }
        }
        out
    }

    pub fn write_ranks_csv(&self, ids: &[String], path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.ranks_csv(ids)).map_err(io_err(path))
    }
}

/// Position of `truth` when `scores` are sorted descending with ties broken
/// by ascending index.
fn rank_of(scores: impl Iterator<Item = f32>, truth: usize, truth_score: f32) -> usize {
    scores
        .enumerate()
        .filter(|&(j, s)| s > truth_score || (s == truth_score && j < truth))
        .count()
}

/// Every candidate's position for one query under the same ordering as the
/// recall computation.
pub fn ranking(scores: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Recall at each of `ks` from an `[M, M]` score matrix whose row `c`
/// scores caption `c` against every figure; the true match of caption `i`
/// is figure `i`.
pub fn retrieval_from_scores(scores: &Tensor<f32>, ks: &[usize]) -> Result<Retrieval> {
    let m = scores.shape()[0];
    if scores.shape() != [m, m] {
        return Err(Error::Config(format!("score matrix must be square, got {:?}", scores.shape())));
    }
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let max_k = ks.last().copied().unwrap_or(0);
    if ks.first() == Some(&0) || ks.is_empty() {
        return Err(Error::Config("recall cut-offs must be positive".into()));
    }
    if m < max_k {
        return Err(Error::Config(format!("retrieval over {m} candidates cannot report recall at {max_k}")));
    }
    if let Some(bad) = scores.data().iter().find(|v| v.is_nan()) {
        return Err(Error::Contract(format!("retrieval score {bad} is not a number")));
    }
    let d = scores.data();
    let caption_ranks: Vec<usize> = (0..m)
        .map(|c| rank_of(d[c * m..(c + 1) * m].iter().copied(), c, d[c * m + c]))
        .collect();
    let figure_ranks: Vec<usize> = (0..m)
        .map(|f| rank_of((0..m).map(|c| d[c * m + f]), f, d[f * m + f]))
        .collect();
    let recall = |ranks: &[usize]| -> Vec<f64> {
        ks.iter()
            .map(|&k| ranks.iter().filter(|&&r| r < k).count() as f64 / m as f64)
            .collect()
    };
    Ok(Retrieval {
        caption_to_figure: recall(&caption_ranks),
        figure_to_caption: recall(&figure_ranks),
        ks,
        caption_ranks,
        figure_ranks,
    })
}

/// `[M, M]` matrix scoring each caption of `rows` (row) against each figure
/// of `rows` (column).
pub fn score_matrix(model: &FccModel, data: &Dataset, rows: &[usize], scorer: Scorer) -> Result<Tensor<f32>> {
    let m = rows.len();
    let v = model.vision_features(data, rows)?;
    let t = model.text_features(data, rows)?;
    let f = v.shape()[1];
    let per_caption = par::map_range(m, |c| -> Result<Vec<f32>> {
        let text = t.row(c);
        match scorer {
            Scorer::DotProduct => Ok((0..m)
                .map(|j| v.row(j).iter().zip(text).map(|(a, b)| a * b).sum())
                .collect()),
            Scorer::Correspondence => {
                let repeated = Tensor::new([m, f], text.repeat(m))?;
                let p = model.fuse_and_classify(&v, &repeated)?;
                Ok(p.data().chunks(2).map(|r| r[CORRESPOND]).collect())
            }
        }
    });
    let mut out = Vec::with_capacity(m * m);
    for row in per_caption {
        out.extend(row?);
    }
    Ok(Tensor::new([m, m], out)?)
}

/// Retrieves figures by caption and captions by figure among `rows`, whose
/// caption `i` belongs to figure `i`.
pub fn eval_bidirectional_retrieval(
    model: &FccModel,
    data: &Dataset,
    rows: &[usize],
    ks: &[usize],
    scorer: Scorer,
) -> Result<Retrieval> {
    let max_k = ks.iter().copied().max().unwrap_or(0);
    if rows.len() < max_k {
        return Err(Error::Config(format!(
            "retrieval over {} records cannot report recall at {max_k}",
            rows.len()
        )));
    }
    let scores = score_matrix(model, data, rows, scorer)?;
    retrieval_from_scores(&scores, ks)
}
