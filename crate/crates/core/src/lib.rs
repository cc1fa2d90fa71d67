//! Fused low-rank adapter lab on a LLaMA-style decoder.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); training
//! and inference run in `f32`, gradient checks and the reference forward
//! in `f64`.

pub mod adapters;
pub mod bench;
pub mod config;
pub mod container;
pub mod error;
pub mod model;
pub mod oracle;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type BaseWeights32 = model::BaseWeights<f32>;
pub type BaseWeights64 = model::BaseWeights<f64>;
pub type AdapterWeights32 = adapters::AdapterWeights<f32>;
pub type AdapterWeights64 = adapters::AdapterWeights<f64>;
pub type FusedModel32 = adapters::FusedModel<f32>;
pub type FusedModel64 = adapters::FusedModel<f64>;
