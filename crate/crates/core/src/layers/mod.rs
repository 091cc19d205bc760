//! Hand-derived forward and backward passes for every layer used by the networks.

mod activation;
mod batchnorm;
mod conv;

pub use activation::{sigmoid, Activation};
pub use batchnorm::{BatchNorm, BatchNormCache, BatchNormGrads, BatchStats, Mode};
pub use conv::{
    conv2d_backward, conv2d_forward, conv_out_size, deconv2d_backward, deconv2d_forward, deconv_out_size, ConvGeometry,
    ConvParams, LayerGrads,
};
