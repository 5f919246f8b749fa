//! Correspondence accuracy on held-out records.

use crate::corpus::{Dataset, Pair, PairSampler};
use crate::error::{Error, Result};
use crate::model::FccModel;
use crate::training::evaluate_pairs;

use super::report::EvalReport;

/// Balanced test pairs over `rows`: every record once with its own caption
/// and once with another record's caption.
pub fn test_pairs(rows: &[usize], seed: u64) -> Result<Vec<Pair>> {
    Ok(PairSampler::new(rows.to_vec(), 2, seed)?.epoch_pairs(0))
}

/// Fraction of balanced test pairs over `rows` decided correctly. Records
/// the model was trained on are rejected.
pub fn eval_fcc_accuracy(model: &FccModel, data: &Dataset, rows: &[usize], seed: u64) -> Result<f64> {
    fcc_accuracy_report(model, data, rows, seed).map(|r| r.get("accuracy").unwrap_or(f64::NAN))
}

/// [`eval_fcc_accuracy`] with loss and pair count, as a report.
pub fn fcc_accuracy_report(model: &FccModel, data: &Dataset, rows: &[usize], seed: u64) -> Result<EvalReport> {
    let overlap: Vec<&str> = rows
        .iter()
        .map(|&i| data.records[i].id.as_str())
        .filter(|id| model.training_ids.contains(*id))
        .collect();
    if !overlap.is_empty() {
        return Err(Error::Contract(format!(
            "{} test records were used for training (first: {})",
            overlap.len(),
            overlap[0]
        )));
    }
    let pairs = test_pairs(rows, seed)?;
    let (loss, accuracy) = evaluate_pairs(model, data, &pairs)?;
    let mut report = EvalReport::new("fcc", format!("{} held-out records, seed {seed}", rows.len()));
    report.insert("accuracy", accuracy);
    report.insert("loss", loss);
    report.insert("pairs", pairs.len() as f64);
    Ok(report)
}
