//! The figure-caption correspondence network: embedding combiner, vision
//! and language trunks, fusion classifier, checkpoints and feature export.

mod checkpoint;
mod config;
mod export;
mod network;
pub mod trunks;

pub use checkpoint::{fill_store, load_checkpoint, read_container, save_checkpoint, write_container, FORMAT_VERSION, MAGIC};
pub use config::{ArchConfig, CombineOp, CombinerConfig, CombinerMode};
pub use export::{branch_features, export_features};
pub use network::{
    fcc_loss, fcc_loss_on_tape, Branch, FccForward, FccModel, Freeze, Inputs, VisualSource, CORRESPOND, FUSION,
    INFER_BATCH,
};
pub use trunks::softmax_rows;
pub(crate) use network::{infer_rows as network_infer_rows, precomputed_features as network_precomputed};

#[cfg(test)]
mod tests;
