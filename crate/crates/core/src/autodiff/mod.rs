//! Dense tensors with tape-based reverse-mode differentiation.

mod element;
mod error;
pub mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use element::Element;
pub use error::AutodiffError;
pub use gradcheck::{gradient_check, GradCheckReport, ParamCheck};
pub use tape::{BatchNormMode, BatchStats, Gradients, Padding, Primitive, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
