//! Parameterized layers and the Adam optimizer.

mod adam;
pub mod layers;
mod params;

pub use adam::{collect_grads, AdamConfig, AdamState, ParamGrads, WeightDecay};
pub use layers::{
    bind_affine, bind_batchnorm, bind_conv_block_2d, conv_block_1d, conv_block_2d, dense, init_batchnorm,
    init_conv1d, init_conv2d, init_conv_block_2d, init_dense, init_embedding, Affine, Block1dOutput, Block2dOutput, Mode, Pool1d, Pool2d,
    StatUpdate,
};
pub use params::{Binding, Param, ParamRole, ParamStore};

#[cfg(test)]
mod tests;
