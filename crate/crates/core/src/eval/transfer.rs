//! Category classification with trunks taken from a correspondence model,
//! a fresh random initialization, or precomputed external features.

use serde::{Deserialize, Serialize};

use crate::corpus::{make_splits, Dataset, SplitMode};
use crate::error::{Error, Result};
use crate::model::{Branch, FccModel, VisualSource};
use crate::par;
use crate::training::{fine_tune, Classifier, TrainConfig};

use super::report::EvalReport;

/// Where the classifier's trunk comes from.
#[derive(Clone, Copy, Debug)]
pub enum TrunkSource<'a> {
    /// The trained trunk of a correspondence model.
    Fcc(&'a FccModel),
    /// A freshly initialized trunk.
    Random,
    /// The records' precomputed visual features (vision only).
    External,
}

impl TrunkSource<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            TrunkSource::Fcc(_) => "fcc",
            TrunkSource::Random => "random",
            TrunkSource::External => "external",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrunkMode {
    /// Only the classification head learns.
    Frozen,
    /// Head and trunk learn.
    Trainable,
}

impl std::str::FromStr for TrunkMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(TrunkMode::Frozen),
            "trainable" => Ok(TrunkMode::Trainable),
            other => Err(Error::Validation(format!("unknown trunk mode {other:?} (expected frozen or trainable)"))),
        }
    }
}

/// Held-out predictions of one fold.
struct FoldOutcome {
    accuracy: f64,
    /// (true class, predicted class) per test record.
    predictions: Vec<(usize, usize)>,
}

/// Cross-validated category accuracy of `branch` classifiers over `rows`.
/// `template` fixes the architecture, vocabulary and tables; every fold
/// starts from the same head initialization (`cfg.seed`).
pub fn eval_transfer_classification(
    template: &FccModel,
    source: TrunkSource<'_>,
    mode: TrunkMode,
    branch: Branch,
    data: &Dataset,
    rows: &[usize],
    cfg: &TrainConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    let classes = data.subset(rows).labels()?;
    if classes.len() < 2 {
        return Err(Error::Config(format!(
            "classification needs at least two classes, got {}",
            classes.len()
        )));
    }
    if let TrunkSource::External = source {
        if branch != Branch::Vision {
            return Err(Error::Config("external features are only available for figures".into()));
        }
    }
    if let TrunkSource::Fcc(m) = source {
        if m.arch != template.arch || m.vocab != template.vocab || m.combiner != template.combiner {
            return Err(Error::Config("source model does not match the template architecture".into()));
        }
    }
    let frozen = mode == TrunkMode::Frozen || matches!(source, TrunkSource::External);
    let splits = make_splits(rows.len(), SplitMode::KFold(cfg.folds), cfg.seed)?;
    let outcomes = par::map_range(splits.fold_count(), |k| -> Result<FoldOutcome> {
        let (train, test) = splits.fold(k);
        let train: Vec<usize> = train.iter().map(|&i| rows[i]).collect();
        let test: Vec<usize> = test.iter().map(|&i| rows[i]).collect();
        let mut clf = Classifier::new(branch, template, classes.clone(), cfg.seed)?;
        match source {
            TrunkSource::Fcc(m) => clf.load_trunk_from(&m.params)?,
            TrunkSource::Random => {}
            TrunkSource::External => clf.visual = VisualSource::Precomputed,
        }
        fine_tune(&mut clf, data, &train, None, cfg, frozen)?;
        let predicted = clf.predict_classes(data, &test)?;
        let truth = clf.targets(data, &test)?;
        let predictions: Vec<(usize, usize)> = truth.into_iter().zip(predicted).collect();
        let correct = predictions.iter().filter(|(t, p)| t == p).count();
        Ok(FoldOutcome {
            accuracy: correct as f64 / predictions.len().max(1) as f64,
            predictions,
        })
    });
    let outcomes: Vec<FoldOutcome> = outcomes.into_iter().collect::<Result<_>>()?;
    let mut report = EvalReport::new(
        format!("transfer/{}/{}/{:?}", branch.prefix().trim_end_matches('.'), source.name(), mode).to_lowercase(),
        format!("{}-fold over {} labeled records, seed {}", cfg.folds, rows.len(), cfg.seed),
    );
    let mean = outcomes.iter().map(|o| o.accuracy).sum::<f64>() / outcomes.len() as f64;
    report.insert("accuracy", mean);
    for (k, o) in outcomes.iter().enumerate() {
        report.insert(format!("fold{k}/accuracy"), o.accuracy);
    }
    for (c, name) in classes.iter().enumerate() {
        let of_class: Vec<&(usize, usize)> = outcomes.iter().flat_map(|o| &o.predictions).filter(|(t, _)| *t == c).collect();
        if !of_class.is_empty() {
            let correct = of_class.iter().filter(|(t, p)| t == p).count();
            report.insert(format!("class/{name}/accuracy"), correct as f64 / of_class.len() as f64);
        }
    }
    Ok(report)
}
