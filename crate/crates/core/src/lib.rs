//! Batch asynchronous advantage actor-critic (BA3C) on CPU.
//!
//! One shared model serves many environment workers through a batching
//! predictor; a single trainer consumes fixed-size batches from a bounded
//! queue. Everything numeric is generic over [`Scalar`] (`f32` for training,
//! `f64` for gradient checks); the aliases below name the common instances.

pub mod agent;
pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod env;
pub mod error;
pub mod experiments;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::{ConvShape, Layout, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Network32 = nn::Network<f32>;
pub type Network64 = nn::Network<f64>;
pub type AdamState32 = optim::AdamState<f32>;
