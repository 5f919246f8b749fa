//! Feature prominence and top-activating samples.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::model::{Branch, FccModel};

/// Added to the mean activation so silent features stay finite.
pub const PROMINENCE_EPS: f64 = 1e-8;

/// One output feature of a branch, summarized over a set of records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureProfile {
    pub branch: Branch,
    pub feature: usize,
    /// Maximum activation over mean activation.
    pub prominence: f64,
    pub max_activation: f64,
    pub mean_activation: f64,
    /// Ids of the most activating records, highest first.
    pub top_samples: Vec<String>,
    pub specificity: Option<f64>,
}

/// `[N, F]` output features of `branch` for `rows`.
pub fn branch_activations(model: &FccModel, data: &Dataset, rows: &[usize], branch: Branch) -> Result<Tensor<f32>> {
    match branch {
        Branch::Vision => model.vision_features(data, rows),
        Branch::Language => model.text_features(data, rows),
    }
}

/// `(max, mean)` of every feature column of `[N, F]` activations.
pub fn feature_statistics(activations: &Tensor<f32>) -> Vec<(f64, f64)> {
    let (n, f) = (activations.shape()[0], activations.shape()[1]);
    (0..f)
        .map(|j| {
            let col = (0..n).map(|i| f64::from(activations.data()[i * f + j]));
            let (max, sum) = col.fold((f64::NEG_INFINITY, 0.0), |(m, s), v| (m.max(v), s + v));
            (max, sum / n.max(1) as f64)
        })
        .collect()
}

/// Feature indices with their prominence `max / (mean + eps)`, sorted by
/// descending prominence (ties by ascending index).
pub fn prominence(activations: &Tensor<f32>) -> Vec<(usize, f64)> {
    let mut scored: Vec<(usize, f64)> = feature_statistics(activations)
        .into_iter()
        .enumerate()
        .map(|(j, (max, mean))| (j, max / (mean + PROMINENCE_EPS)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored
}

/// The `k` records with the largest value of `feature`, highest first and
/// ties by ascending id. `k` beyond the record count is clipped.
pub fn top_from_activations(activations: &Tensor<f32>, ids: &[String], feature: usize, k: usize) -> Result<Vec<(String, f32)>> {
    let (n, f) = (activations.shape()[0], activations.shape()[1]);
    if feature >= f {
        return Err(Error::Config(format!("feature {feature} out of range (features: {f})")));
    }
    if ids.len() != n {
        return Err(Error::Contract(format!("{} ids for {n} activation rows", ids.len())));
    }
    if k > n {
        log::warn!("requested the top {k} of {n} records; returning all {n}");
    }
    let mut order: Vec<usize> = (0..n).collect();
    let value = |i: usize| activations.data()[i * f + feature];
    order.sort_by(|&a, &b| value(b).total_cmp(&value(a)).then_with(|| ids[a].cmp(&ids[b])));
    Ok(order.into_iter().take(k.min(n)).map(|i| (ids[i].clone(), value(i))).collect())
}

/// [`top_from_activations`] over the branch features of `rows`.
pub fn top_activating(
    model: &FccModel,
    data: &Dataset,
    rows: &[usize],
    branch: Branch,
    feature: usize,
    k: usize,
) -> Result<Vec<(String, f32)>> {
    let acts = branch_activations(model, data, rows, branch)?;
    top_from_activations(&acts, &ids(data, rows), feature, k)
}

pub(crate) fn ids(data: &Dataset, rows: &[usize]) -> Vec<String> {
    rows.iter().map(|&i| data.records[i].id.clone()).collect()
}

/// Profiles of every feature of `branch`, most prominent first, each with
/// its `top_k` records.
pub fn rank_features(
    model: &FccModel,
    data: &Dataset,
    rows: &[usize],
    branch: Branch,
    top_k: usize,
) -> Result<Vec<FeatureProfile>> {
    let acts = branch_activations(model, data, rows, branch)?;
    let stats = feature_statistics(&acts);
    let ids = ids(data, rows);
    prominence(&acts)
        .into_iter()
        .map(|(feature, prominence)| {
            let top = top_from_activations(&acts, &ids, feature, top_k.min(rows.len()))?;
            Ok(FeatureProfile {
                branch,
                feature,
                prominence,
                max_activation: stats[feature].0,
                mean_activation: stats[feature].1,
                top_samples: top.into_iter().map(|(id, _)| id).collect(),
                specificity: None,
            })
        })
        .collect()
}
