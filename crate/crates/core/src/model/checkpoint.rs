//! Binary checkpoint container.
//!
//! Layout (little endian): magic `FCCK`, `u32` format version, `u64` length
//! of a UTF-8 JSON metadata block followed by the block, `u32` parameter
//! count, then per parameter: `u32` name length, UTF-8 name, `u8` dtype tag
//! (0 = f32), `u32` rank, `rank × u64` extents and the row-major values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::corpus::{TableKind, Vocab};
use crate::error::{io_err, Error, Result};
use crate::nn::ParamStore;

use super::config::{ArchConfig, CombinerConfig, CombinerMode};
use super::network::{FccModel, VisualSource};

pub const MAGIC: &[u8; 4] = b"FCCK";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Writes `meta` and every parameter of `store`.
pub fn write_container<M: Serialize>(path: impl AsRef<Path>, meta: &M, store: &ParamStore) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let meta = serde_json::to_vec(meta).map_err(|e| Error::Format(e.to_string()))?;
    let io = |r: std::io::Result<()>| r.map_err(io_err(path));
    io(w.write_all(MAGIC))?;
    io(w.write_u32::<LittleEndian>(FORMAT_VERSION))?;
    io(w.write_u64::<LittleEndian>(meta.len() as u64))?;
    io(w.write_all(&meta))?;
    io(w.write_u32::<LittleEndian>(store.len() as u32))?;
    for p in store.iter() {
        io(w.write_u32::<LittleEndian>(p.name.len() as u32))?;
        io(w.write_all(p.name.as_bytes()))?;
        io(w.write_u8(DTYPE_F32))?;
        io(w.write_u32::<LittleEndian>(p.tensor.rank() as u32))?;
        for &e in p.tensor.shape() {
            io(w.write_u64::<LittleEndian>(e as u64))?;
        }
        for &v in p.tensor.data() {
            io(w.write_f32::<LittleEndian>(v))?;
        }
    }
    io(w.flush())
}

/// Reads a container written by [`write_container`].
pub fn read_container<M: DeserializeOwned>(path: impl AsRef<Path>) -> Result<(M, Vec<(String, Tensor<f32>)>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);
    let io = io_err(path);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err(path))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("{}: not a checkpoint (bad magic {magic:?})", path.display())));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io_err(path))?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: checkpoint format version {version}, this build reads {FORMAT_VERSION}",
            path.display()
        )));
    }
    let meta_len = r.read_u64::<LittleEndian>().map_err(io_err(path))?;
    let mut meta = Vec::new();
    (&mut r).take(meta_len).read_to_end(&mut meta).map_err(io_err(path))?;
    if meta.len() as u64 != meta_len {
        return Err(io(std::io::ErrorKind::UnexpectedEof.into()));
    }
    let meta: M = serde_json::from_slice(&meta).map_err(|e| Error::Format(format!("{}: metadata: {e}", path.display())))?;
    let count = r.read_u32::<LittleEndian>().map_err(io_err(path))?;
    let mut params = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = r.read_u32::<LittleEndian>().map_err(io_err(path))? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(io_err(path))?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(format!("parameter name: {e}")))?;
        let dtype = r.read_u8().map_err(io_err(path))?;
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("parameter {name}: unknown dtype tag {dtype}")));
        }
        let rank = r.read_u32::<LittleEndian>().map_err(io_err(path))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u64::<LittleEndian>().map_err(io_err(path))? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0f32; numel];
        r.read_f32_into::<LittleEndian>(&mut data).map_err(io_err(path))?;
        let tensor = Tensor::new(shape, data).map_err(|e| Error::Format(format!("parameter {name}: {e}")))?;
        params.push((name, tensor));
    }
    Ok((meta, params))
}

/// Overwrites every parameter of `store` from `loaded`, which must contain
/// exactly the same names with the same shapes.
pub fn fill_store(store: &mut ParamStore, loaded: Vec<(String, Tensor<f32>)>) -> Result<()> {
    if loaded.len() != store.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} parameters, the model has {}",
            loaded.len(),
            store.len()
        )));
    }
    for (name, tensor) in loaded {
        let dst = store
            .tensor_mut(&name)
            .map_err(|_| Error::Format(format!("checkpoint parameter {name} is not part of the model")))?;
        if dst.shape() != tensor.shape() {
            return Err(Error::Format(format!(
                "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                tensor.shape(),
                dst.shape()
            )));
        }
        *dst = tensor;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct FccMeta {
    model: String,
    arch: ArchConfig,
    combiner: CombinerConfig,
    visual: VisualSource,
    vocab: Vocab,
    training_ids: Vec<String>,
    tables: Vec<(TableKind, u64)>,
}

const FCC_MODEL: &str = "fcc";

pub fn save_checkpoint(model: &FccModel, path: impl AsRef<Path>) -> Result<()> {
    let meta = FccMeta {
        model: FCC_MODEL.into(),
        arch: model.arch.clone(),
        combiner: model.combiner,
        visual: model.visual,
        vocab: model.vocab.clone(),
        training_ids: model.training_ids.iter().cloned().collect(),
        tables: model.table_fingerprints().to_vec(),
    };
    write_container(path, &meta, &model.params)
}

/// Loads a correspondence model. Pretrained tables are not stored in the
/// checkpoint; modes (b)/(c) need [`FccModel::attach_tables`] before use.
/// With `expected` set, a checkpoint of another combiner mode is rejected.
pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<CombinerMode>) -> Result<FccModel> {
    let (meta, params): (FccMeta, _) = read_container(path.as_ref())?;
    if meta.model != FCC_MODEL {
        return Err(Error::Format(format!("checkpoint holds a {:?} model, not a correspondence model", meta.model)));
    }
    if let Some(mode) = expected {
        if meta.combiner.mode != mode {
            return Err(Error::Config(format!(
                "checkpoint was trained with combiner mode {:?}, mode {mode:?} was requested",
                meta.combiner.mode
            )));
        }
    }
    let mut model = FccModel::skeleton(meta.arch, meta.combiner, meta.vocab)?;
    fill_store(&mut model.params, params)?;
    model.visual = meta.visual;
    model.training_ids = meta.training_ids.into_iter().collect();
    model.set_table_fingerprints(meta.tables);
    Ok(model)
}
