//! Multi-task learning engine for vocal-burst emotion recognition.
//!
//! The numeric core ([`diffcore`], [`metrics`], [`weighting`], [`nn`],
//! [`backbone`], [`heads`]) and the [`trainer`] are generic over the
//! [`Scalar`] type. Data files and checkpoints store `f64` regardless of
//! the training precision.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod trainer;
pub mod weighting;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = diffcore::Tensor<f64>;
pub type Tensor32 = diffcore::Tensor<f32>;
