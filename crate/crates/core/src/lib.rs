//! Figure-caption correspondence: co-training a convolutional vision network
//! and a convolutional language network on figure/caption pairs, with
//! knowledge-graph embedding enrichment, evaluation harnesses and feature
//! inspection tools.

pub mod autodiff;
pub mod cli;
pub mod corpus;
pub mod par;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod inspect;
pub mod model;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
