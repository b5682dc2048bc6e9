//! Shape-adaptive latent diffusion for irregular canvases.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision used by the trained models.

pub mod attention;
pub mod autograd;
pub mod autoencoder;
pub mod bench;
pub mod canvas;
pub mod checkpoint;
pub mod denoiser;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod schedule;
pub mod scalar;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Denoiser32 = denoiser::DenoiserModel<f32>;
pub type Denoiser64 = denoiser::DenoiserModel<f64>;
pub type Autoencoder32 = autoencoder::AutoencoderModel<f32>;
pub type Autoencoder64 = autoencoder::AutoencoderModel<f64>;
pub type Sampler32<'m> = pipeline::Sampler<'m, f32>;
pub type Sampler64<'m> = pipeline::Sampler<'m, f64>;
