use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: dimension mismatch on axis {axis}: {detail}")]
    Dimension {
        op: &'static str,
        axis: usize,
        detail: String,
    },
    #[error("{op}: produced a non-finite value")]
    Numeric { op: &'static str },
    #[error("degenerate statistics: {0}")]
    DegenerateStatistics(String),
    #[error("contract violated: {0}")]
    Contract(String),
}
