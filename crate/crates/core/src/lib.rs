//! Training and evaluation engine for six-dimensional emotion-intensity
//! regression from pre-extracted visual, audio, and text feature sequences.
//!
//! The numeric core ([`tensor`], [`layers`], [`model`], [`losses`], [`optim`],
//! [`metrics`]) is generic over a [`Scalar`] type; the data pipeline and
//! trainer run in `f64`, exposed through the aliases below.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Model64 = model::Model<f64>;
pub type Model32 = model::Model<f32>;
pub type ForwardOutputs64 = model::ForwardOutputs<f64>;
pub type LossBreakdown64 = losses::LossBreakdown<f64>;
