//! Native-resolution image tokenizer with a flow-matching generator on top.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the `*32`
//! aliases below are what the pipeline uses in practice, the `*64` ones back
//! gradient checks.

pub mod autodiff;
pub mod autoencoder;
pub mod backbone;
pub mod checkpoint;
pub mod flowgen;
mod error;
pub mod imagedata;
pub mod losses;
pub mod metrics;
pub mod naflex;
pub mod params;
pub mod rng;
mod scalar;
mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Image32 = imagedata::Image<f32>;
pub type Image64 = imagedata::Image<f64>;
pub type ParameterStore32 = params::ParameterStore<f32>;
pub type ParameterStore64 = params::ParameterStore<f64>;
pub type Autoencoder32 = autoencoder::Autoencoder<f32>;
pub type FlowState32 = flowgen::FlowState<f32>;
pub type FrozenExtractor32 = losses::FrozenExtractor<f32>;
