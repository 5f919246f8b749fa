//! The two supervised baselines for correspondence: scoring pairs by the
//! agreement of two category classifiers, and training only the fusion
//! layers on top of frozen classifier trunks.

use crate::corpus::{Dataset, Pair};
use crate::error::{Error, Result};
use crate::model::{Branch, FccModel, Freeze};

use super::classifier::Classifier;
use super::config::TrainConfig;
use super::fcc::{best_fold, train_folds};
use super::log::RunLog;

/// Decision threshold on the softmax dot product.
pub const DIRECT_THRESHOLD: f64 = 0.325;

/// Dot product of two class distributions.
pub fn direct_score(vision: &[f32], language: &[f32]) -> Result<f64> {
    if vision.len() != language.len() {
        return Err(Error::Config(format!(
            "class distributions over {} and {} classes cannot be compared",
            vision.len(),
            language.len()
        )));
    }
    Ok(vision.iter().zip(language).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum())
}

/// Correspondence decision and score of one pair of distributions.
pub fn direct_decision(vision: &[f32], language: &[f32], threshold: f64) -> Result<(bool, f64)> {
    let s = direct_score(vision, language)?;
    Ok((s > threshold, s))
}

fn check_pair(vision: &Classifier, language: &Classifier) -> Result<()> {
    if vision.branch != Branch::Vision || language.branch != Branch::Language {
        return Err(Error::Config("expected a vision and a language classifier".into()));
    }
    if vision.classes != language.classes {
        return Err(Error::Config(format!(
            "classifiers were trained on different label taxonomies ({:?} vs {:?})",
            vision.classes, language.classes
        )));
    }
    Ok(())
}

/// Decision and score for every pair.
pub fn baseline_direct_combination(
    vision: &Classifier,
    language: &Classifier,
    data: &Dataset,
    pairs: &[Pair],
    threshold: f64,
) -> Result<Vec<(bool, f64)>> {
    check_pair(vision, language)?;
    let figures: Vec<usize> = pairs.iter().map(|p| p.figure).collect();
    let captions: Vec<usize> = pairs.iter().map(|p| p.caption).collect();
    let pv = vision.probabilities(data, &figures)?;
    let pt = language.probabilities(data, &captions)?;
    (0..pairs.len())
        .map(|i| direct_decision(pv.row(i), pt.row(i), threshold))
        .collect()
}

/// Fraction of pairs whose thresholded decision matches the truth.
pub fn direct_combination_accuracy(
    vision: &Classifier,
    language: &Classifier,
    data: &Dataset,
    pairs: &[Pair],
    threshold: f64,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Contract("evaluation over zero pairs".into()));
    }
    let decisions = baseline_direct_combination(vision, language, data, pairs, threshold)?;
    let correct = decisions.iter().zip(pairs).filter(|((d, _), p)| *d == p.positive()).count();
    Ok(correct as f64 / pairs.len() as f64)
}

/// Copies the classifiers' trunks into `template` and trains only the
/// fusion layers with the same cross-validation protocol as full training.
pub fn baseline_supervised_pretrain(
    data: &Dataset,
    template: &FccModel,
    vision: &Classifier,
    language: &Classifier,
    cfg: &TrainConfig,
) -> Result<(FccModel, RunLog)> {
    let model = pretrained_trunks(template, vision, language)?;
    best_fold(train_folds(data, &model, cfg, Freeze::TRUNKS)?)
}

/// `template` with its trunks replaced by the classifiers' trunks; train it
/// with [`Freeze::TRUNKS`] to fit only the fusion layers.
pub fn pretrained_trunks(template: &FccModel, vision: &Classifier, language: &Classifier) -> Result<FccModel> {
    check_pair(vision, language)?;
    if vision.arch != template.arch || language.arch != template.arch {
        return Err(Error::Config("classifier trunks do not match the model architecture".into()));
    }
    if language.vocab != template.vocab || language.combiner != template.combiner {
        return Err(Error::Config(
            "language classifier uses a different vocabulary or combiner than the model".into(),
        ));
    }
    let mut model = template.clone();
    model.params.copy_prefix_from(&vision.params, Branch::Vision.prefix())?;
    model.params.copy_prefix_from(&language.params, Branch::Language.prefix())?;
    Ok(model)
}
