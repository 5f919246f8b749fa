use std::collections::HashMap;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// How the optimizer treats a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    /// Updated by the optimizer.
    Weight,
    /// Embedding matrix whose row 0 is the frozen all-zero padding vector.
    PaddedEmbedding,
    /// Batch-normalization running statistic; never receives gradients.
    RunningStat,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor<f32>,
    pub role: ParamRole,
}

impl Param {
    pub fn trainable(&self) -> bool {
        self.role != ParamRole::RunningStat
    }
}

/// Ordered, uniquely named collection of model tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<f32>, role: ParamRole) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Validation(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, tensor, role });
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.position(name)
            .map(|i| &self.params[i])
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name).map(|p| &p.tensor)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<f32>> {
        let i = self
            .position(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
        Ok(&mut self.params[i].tensor)
    }

    pub fn by_index(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut Param {
        &mut self.params[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable()).map(|p| p.tensor.numel()).sum()
    }

    /// Trainable entries under a name prefix.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable() && p.name.starts_with(prefix))
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// FNV-1a over names and value bits of every parameter under `prefix`.
    pub fn checksum(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            feed(p.name.as_bytes());
            for v in p.tensor.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Copies every parameter under `prefix` from `other`, which must hold
    /// identically shaped tensors under the same names.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) -> Result<()> {
        for p in other.params.iter().filter(|p| p.name.starts_with(prefix)) {
            let dst = self.tensor_mut(&p.name)?;
            if dst.shape() != p.tensor.shape() {
                return Err(Error::Config(format!(
                    "parameter {} has shape {:?} here but {:?} in the source",
                    p.name,
                    dst.shape(),
                    p.tensor.shape()
                )));
            }
            *dst = p.tensor.clone();
        }
        Ok(())
    }

    /// Registers every parameter on `tape`. Trainable parameters for which
    /// `frozen` returns false require gradients.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, f32>, frozen: &dyn Fn(&str) -> bool) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf_ref(&p.tensor, p.trainable() && !frozen(&p.name)))
            .collect();
        Binding { vars }
    }
}

/// Tape handles for a bound [`ParamStore`], index-aligned with it.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, store: &ParamStore, name: &str) -> Result<Var> {
        store
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
