//! Evaluation harnesses: correspondence accuracy on held-out records,
//! bidirectional retrieval, and category classification transfer.

mod accuracy;
mod report;
mod retrieval;
mod transfer;

#[cfg(test)]
mod tests;

pub use accuracy::{eval_fcc_accuracy, fcc_accuracy_report, test_pairs};
pub use report::EvalReport;
pub use retrieval::{
    eval_bidirectional_retrieval, ranking, retrieval_from_scores, score_matrix, Retrieval, Scorer, DEFAULT_KS,
};
pub use transfer::{eval_transfer_classification, TrunkMode, TrunkSource};
