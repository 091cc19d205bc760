//! Context-encoder inpainting of chest X-ray patches.
//!
//! A generator reconstructs the blanked central region of an image from its surroundings and a
//! discriminator scores patches as real or reconstructed. Differences between an image and its
//! reconstruction highlight content the model does not consider healthy tissue.
//!
//! All numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases below fix the
//! precision for the two common uses.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod data;
mod error;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod models;
pub mod optim;
mod rng;
mod scalar;
pub mod synthetic;
mod tensor;

pub use error::{Error, Result};
pub use rng::{Rng, RngState};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Generator32 = models::Generator<f32>;
pub type Generator64 = models::Generator<f64>;
pub type Discriminator32 = models::Discriminator<f32>;
pub type Discriminator64 = models::Discriminator<f64>;
pub type Trainer32 = optim::Trainer<f32>;
pub type Trainer64 = optim::Trainer<f64>;
