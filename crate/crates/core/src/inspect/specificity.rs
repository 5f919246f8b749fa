//! Concept-based semantic specificity of features: how exclusive the
//! concepts in a feature's top-activating captions are to that feature.

use std::collections::{BTreeMap, BTreeSet};

use crate::autodiff::Tensor;
use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::model::{Branch, FccModel};

use super::features::{branch_activations, ids, top_from_activations};

/// Captions pooled per feature.
pub const DEFAULT_TOP_K: usize = 4;

/// Mean tf-idf over each document's distinct concepts, where the documents
/// are the per-feature concept pools: tf is the concept's share of its
/// document and idf is `ln(documents / documents containing it)`. Empty
/// documents score 0.
pub fn raw_specificity(documents: &[Vec<String>]) -> Vec<f64> {
    let total = documents.len() as f64;
    let mut df: BTreeMap<&str, usize> = BTreeMap::new();
    for doc in documents {
        for c in doc.iter().map(String::as_str).collect::<BTreeSet<_>>() {
            *df.entry(c).or_default() += 1;
        }
    }
    documents
        .iter()
        .map(|doc| {
            if doc.is_empty() {
                return 0.0;
            }
            let mut tf: BTreeMap<&str, usize> = BTreeMap::new();
            for c in doc {
                *tf.entry(c.as_str()).or_default() += 1;
            }
            let len = doc.len() as f64;
            let sum: f64 = tf
                .iter()
                .map(|(c, &n)| (n as f64 / len) * (total / df[c] as f64).ln())
                .sum();
            sum / tf.len() as f64
        })
        .collect()
}

/// [`raw_specificity`] divided by its maximum, so the most specific
/// feature scores 1 (all zeros when no concept is exclusive anywhere).
pub fn specificity_scores(documents: &[Vec<String>]) -> Vec<f64> {
    let raw = raw_specificity(documents);
    let max = raw.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        raw.into_iter().map(|v| v / max).collect()
    } else {
        raw
    }
}

/// Concept ids annotated on the caption of every row; rows without
/// annotations contribute nothing. Fails when no row has annotations.
fn caption_concepts(data: &Dataset, rows: &[usize]) -> Result<BTreeMap<String, Vec<String>>> {
    let mut out = BTreeMap::new();
    for &i in rows {
        let r = &data.records[i];
        if let Some(concepts) = &r.concepts {
            out.insert(r.id.clone(), concepts.iter().flatten().cloned().collect());
        }
    }
    if out.is_empty() {
        return Err(Error::Config("captions carry no concept annotations".into()));
    }
    Ok(out)
}

/// Per-feature pseudo-documents: the pooled concepts of the captions of
/// each feature's `top_k` most activating figures.
pub fn pseudo_documents(activations: &Tensor<f32>, data: &Dataset, rows: &[usize], top_k: usize) -> Result<Vec<Vec<String>>> {
    let concepts = caption_concepts(data, rows)?;
    let ids = ids(data, rows);
    (0..activations.shape()[1])
        .map(|f| {
            let top = top_from_activations(activations, &ids, f, top_k.min(rows.len()))?;
            Ok(top
                .iter()
                .flat_map(|(id, _)| concepts.get(id).into_iter().flatten().cloned())
                .collect())
        })
        .collect()
}

/// Specificity in [0, 1] of every vision feature over `rows`.
pub fn specificity_all(model: &FccModel, data: &Dataset, rows: &[usize], top_k: usize) -> Result<Vec<f64>> {
    let acts = branch_activations(model, data, rows, Branch::Vision)?;
    Ok(specificity_scores(&pseudo_documents(&acts, data, rows, top_k)?))
}

/// Specificity of one vision feature, rescaled against all features.
pub fn semantic_specificity(model: &FccModel, data: &Dataset, rows: &[usize], feature: usize, top_k: usize) -> Result<f64> {
    let f = model.arch.feature_dim();
    if feature >= f {
        return Err(Error::Config(format!("feature {feature} out of range (features: {f})")));
    }
    Ok(specificity_all(model, data, rows, top_k)?[feature])
}
