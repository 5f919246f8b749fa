//! Feature export in the embedding-table text format.

use std::path::Path;

use crate::corpus::{Dataset, EmbeddingTable, TableKind};
use crate::error::Result;

use super::network::{Branch, FccModel};

/// Branch features of every record, keyed by record id.
pub fn branch_features(model: &FccModel, data: &Dataset, branch: Branch) -> Result<EmbeddingTable> {
    let all: Vec<usize> = (0..data.len()).collect();
    let features = match branch {
        Branch::Vision => model.vision_features(data, &all)?,
        Branch::Language => model.text_features(data, &all)?,
    };
    let dim = model.arch.feature_dim();
    let mut table = EmbeddingTable::new(TableKind::Concept, dim)?;
    for (i, r) in data.records.iter().enumerate() {
        table.insert(r.id.clone(), &features.data()[i * dim..(i + 1) * dim])?;
    }
    Ok(table)
}

/// Writes `id v1 … v_F` rows under a `count F` header.
pub fn export_features(model: &FccModel, data: &Dataset, branch: Branch, path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let table = branch_features(model, data, branch)?;
    table.write(path)?;
    Ok(table)
}
