//! Parameterized layers composed from tape primitives.
//!
//! Forward functions are generic over the element type so the same code
//! path can be gradient-checked in `f64`; parameter initialization and
//! binding work on the `f32` [`ParamStore`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, BatchStats, Element, Padding, Tape, Tensor, Var};
use crate::error::Result;

use super::params::{Binding, ParamRole, ParamStore};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the previous running statistic in each update.
pub const BN_MOMENTUM: f32 = 0.9;
pub const EMBEDDING_INIT: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

/// Weight and bias handles of a convolution or dense layer.
#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Debug)]
pub struct BatchNormRefs<'s, T> {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: &'s [T],
    pub running_var: &'s [T],
}

pub fn batchnorm_forward<T: Element>(
    tape: &mut Tape<'_, T>,
    x: Var,
    bn: &BatchNormRefs<'_, T>,
    mode: Mode,
) -> Result<(Var, Option<BatchStats<T>>), AutodiffError> {
    match mode {
        Mode::Train => tape
            .batchnorm_train(x, bn.gamma, bn.beta, BN_EPS)
            .map(|(y, s)| (y, Some(s))),
        Mode::Infer => tape
            .batchnorm_infer(x, bn.gamma, bn.beta, bn.running_mean, bn.running_var, BN_EPS)
            .map(|y| (y, None)),
    }
}

/// `running ← momentum·running + (1 − momentum)·batch`.
pub fn update_running_stats(mean: &mut [f32], var: &mut [f32], stats: &BatchStats<f32>) {
    for (r, b) in mean.iter_mut().zip(&stats.mean) {
        *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
    }
    for (r, b) in var.iter_mut().zip(&stats.var) {
        *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
    }
}

pub fn dense<T: Element>(tape: &mut Tape<'_, T>, x: Var, layer: Affine) -> Result<Var, AutodiffError> {
    let h = tape.matmul(x, layer.weight)?;
    tape.bias_add(h, layer.bias, 1)
}

#[derive(Clone, Debug)]
pub struct ConvBlock2dRefs<'s, T> {
    pub convs: [Affine; 2],
    pub norms: [BatchNormRefs<'s, T>; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pool2d {
    /// 2×2 window, stride 2.
    Halve,
    /// Max over the whole feature map, yielding [N, C].
    Global,
}

#[derive(Debug)]
pub struct Block2dOutput<T> {
    pub output: Var,
    /// Activation after the second ReLU, before pooling.
    pub pre_pool: Var,
    /// Batch statistics of both normalizations (train mode only).
    pub stats: Vec<BatchStats<T>>,
}

/// (conv 3×3 same → batchnorm → ReLU) × 2 → pool.
pub fn conv_block_2d<T: Element>(
    tape: &mut Tape<'_, T>,
    x: Var,
    block: &ConvBlock2dRefs<'_, T>,
    mode: Mode,
    pool: Pool2d,
) -> Result<Block2dOutput<T>, AutodiffError> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(AutodiffError::Dimension {
            op: "conv_block_2d",
            axis: 0,
            detail: format!("expects [N,C,H,W], got {shape:?}"),
        });
    }
    let kernel = tape.shape(block.convs[0].weight)[2];
    for axis in [2, 3] {
        if shape[axis] < kernel {
            return Err(AutodiffError::Dimension {
                op: "conv_block_2d",
                axis,
                detail: format!("extent {} below kernel {kernel}", shape[axis]),
            });
        }
    }
    let mut h = x;
    let mut stats = Vec::new();
    for (conv, bn) in block.convs.iter().zip(&block.norms) {
        let c = tape.conv2d(h, conv.weight, 1, Padding::Same)?;
        let c = tape.bias_add(c, conv.bias, 1)?;
        let (n, s) = batchnorm_forward(tape, c, bn, mode)?;
        stats.extend(s);
        h = tape.relu(n)?;
    }
    let output = match pool {
        Pool2d::Halve => tape.maxpool2d(h, 2, 2)?,
        Pool2d::Global => tape.global_maxpool2d(h)?,
    };
    Ok(Block2dOutput {
        output,
        pre_pool: h,
        stats,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pool1d {
    Window(usize),
    Global,
}

#[derive(Clone, Copy, Debug)]
pub struct Block1dOutput {
    pub output: Var,
    /// Activation after the ReLU, before pooling: [N, T − window + 1, F].
    pub pre_pool: Var,
}

/// Valid 1-D convolution → ReLU → max pool over time. `x`: [N, T, D].
pub fn conv_block_1d<T: Element>(
    tape: &mut Tape<'_, T>,
    x: Var,
    conv: Affine,
    pool: Pool1d,
) -> Result<Block1dOutput, AutodiffError> {
    let c = tape.conv1d(x, conv.weight, Padding::Valid)?;
    let c = tape.bias_add(c, conv.bias, 2)?;
    let pre_pool = tape.relu(c)?;
    let output = match pool {
        Pool1d::Window(w) => tape.maxpool1d(pre_pool, w)?,
        Pool1d::Global => tape.global_maxpool1d(pre_pool)?,
    };
    Ok(Block1dOutput { output, pre_pool })
}

fn he_limit(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

pub fn init_conv2d<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    rng: &mut R,
) -> Result<()> {
    let fan_in = in_channels * kernel * kernel;
    store.insert(
        format!("{prefix}.weight"),
        Tensor::uniform([out_channels, in_channels, kernel, kernel], he_limit(fan_in), rng),
        ParamRole::Weight,
    )?;
    store.insert(format!("{prefix}.bias"), Tensor::zeros([out_channels]), ParamRole::Weight)?;
    Ok(())
}

pub fn init_batchnorm(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<()> {
    store.insert(format!("{prefix}.gamma"), Tensor::ones([channels]), ParamRole::Weight)?;
    store.insert(format!("{prefix}.beta"), Tensor::zeros([channels]), ParamRole::Weight)?;
    store.insert(format!("{prefix}.running_mean"), Tensor::zeros([channels]), ParamRole::RunningStat)?;
    store.insert(format!("{prefix}.running_var"), Tensor::ones([channels]), ParamRole::RunningStat)?;
    Ok(())
}

pub fn init_conv_block_2d<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    in_channels: usize,
    out_channels: usize,
    rng: &mut R,
) -> Result<()> {
    init_conv2d(store, &format!("{prefix}.conv0"), in_channels, out_channels, 3, rng)?;
    init_batchnorm(store, &format!("{prefix}.bn0"), out_channels)?;
    init_conv2d(store, &format!("{prefix}.conv1"), out_channels, out_channels, 3, rng)?;
    init_batchnorm(store, &format!("{prefix}.bn1"), out_channels)?;
    Ok(())
}

/// Filters stored as [F, window, D].
pub fn init_conv1d<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    depth: usize,
    filters: usize,
    window: usize,
    rng: &mut R,
) -> Result<()> {
    store.insert(
        format!("{prefix}.weight"),
        Tensor::uniform([filters, window, depth], he_limit(window * depth), rng),
        ParamRole::Weight,
    )?;
    store.insert(format!("{prefix}.bias"), Tensor::zeros([filters]), ParamRole::Weight)?;
    Ok(())
}

/// Weight stored as [in, out].
pub fn init_dense<R: Rng>(store: &mut ParamStore, prefix: &str, inputs: usize, outputs: usize, rng: &mut R) -> Result<()> {
    store.insert(
        format!("{prefix}.weight"),
        Tensor::uniform([inputs, outputs], he_limit(inputs), rng),
        ParamRole::Weight,
    )?;
    store.insert(format!("{prefix}.bias"), Tensor::zeros([outputs]), ParamRole::Weight)?;
    Ok(())
}

/// Uniform(±0.05) rows with an all-zero padding row 0.
pub fn init_embedding<R: Rng>(store: &mut ParamStore, name: &str, vocab: usize, dim: usize, rng: &mut R) -> Result<()> {
    let mut table = Tensor::uniform([vocab, dim], EMBEDDING_INIT, rng);
    table.row_mut(0).fill(0.0);
    store.insert(name, table, ParamRole::PaddedEmbedding)?;
    Ok(())
}

pub fn bind_affine(store: &ParamStore, binding: &Binding, prefix: &str) -> Result<Affine> {
    Ok(Affine {
        weight: binding.var(store, &format!("{prefix}.weight"))?,
        bias: binding.var(store, &format!("{prefix}.bias"))?,
    })
}

pub fn bind_batchnorm<'s>(store: &'s ParamStore, binding: &Binding, prefix: &str) -> Result<BatchNormRefs<'s, f32>> {
    Ok(BatchNormRefs {
        gamma: binding.var(store, &format!("{prefix}.gamma"))?,
        beta: binding.var(store, &format!("{prefix}.beta"))?,
        running_mean: store.tensor(&format!("{prefix}.running_mean"))?.data(),
        running_var: store.tensor(&format!("{prefix}.running_var"))?.data(),
    })
}

pub fn bind_conv_block_2d<'s>(
    store: &'s ParamStore,
    binding: &Binding,
    prefix: &str,
) -> Result<ConvBlock2dRefs<'s, f32>> {
    Ok(ConvBlock2dRefs {
        convs: [
            bind_affine(store, binding, &format!("{prefix}.conv0"))?,
            bind_affine(store, binding, &format!("{prefix}.conv1"))?,
        ],
        norms: [
            bind_batchnorm(store, binding, &format!("{prefix}.bn0"))?,
            bind_batchnorm(store, binding, &format!("{prefix}.bn1"))?,
        ],
    })
}

/// Running-statistic update produced by a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub prefix: String,
    pub stats: BatchStats<f32>,
}

impl StatUpdate {
    pub fn apply(&self, store: &mut ParamStore) -> Result<()> {
        let mut mean = store.tensor(&format!("{}.running_mean", self.prefix))?.clone();
        let var = store.tensor_mut(&format!("{}.running_var", self.prefix))?;
        update_running_stats(mean.data_mut(), var.data_mut(), &self.stats);
        *store.tensor_mut(&format!("{}.running_mean", self.prefix))? = mean;
        Ok(())
    }
}
