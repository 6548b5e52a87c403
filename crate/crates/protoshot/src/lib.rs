//! Episodic meta-learning for few-shot text classification.
//!
//! The crate provides a small reverse-mode autodiff engine with second-order
//! support ([`tensor`]), feed-forward encoders with per-step normalization
//! ([`models`]), the optimizers the training loop relies on ([`optim`]),
//! episode sampling and dataset handling ([`episodes`]), the meta-learning
//! algorithms themselves ([`meta`]), and an experiment harness ([`harness`])
//! that the command-line front end drives.
//!
//! Everything numeric is generic over the scalar type through [`scalar::Real`]
//! (implemented for `f32` and `f64`); the aliases below fix the common
//! concrete choices.

pub mod error;
pub mod scalar;
pub mod rng;
pub mod tensor;
pub mod models;
pub mod optim;
pub mod episodes;
pub mod meta;
pub mod gradcheck;
pub mod harness;

pub use error::{Error, Result};
pub use scalar::Real;

/// Double-precision tensor, the default for experiments.
pub type Tensor64 = tensor::Tensor<f64>;
/// Single-precision tensor.
pub type Tensor32 = tensor::Tensor<f32>;
/// Named double-precision parameter collection.
pub type NamedTensors64 = tensor::NamedTensors<f64>;
