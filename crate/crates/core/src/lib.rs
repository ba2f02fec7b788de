//! Sentiment classification toolkit: a semi-supervised recursive autoencoder
//! trained with L-BFGS, and a dual-channel CNN + bidirectional SRU fusion
//! classifier with attention and max pooling.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision used by training and gradient verification.

pub mod bench;
pub mod checkpoint;
pub mod dualchannel;
pub mod embeddings;
pub mod error;
pub mod numerics;
pub mod optim;
pub mod rae;
pub mod scalar;
pub mod textdata;

pub use error::{Error, Result};
pub use numerics::{Graph, NodeId, Tensor};
pub use scalar::Scalar;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type EmbeddingMatrix64 = embeddings::EmbeddingMatrix<f64>;
pub type EmbeddingMatrix32 = embeddings::EmbeddingMatrix<f32>;
pub type RaeParams64 = rae::RaeParams<f64>;
pub type RaeParams32 = rae::RaeParams<f32>;
pub type FusionModel64 = dualchannel::FusionModel<f64>;
pub type FusionModel32 = dualchannel::FusionModel<f32>;
