//! Reverse-mode differentiation, parameter storage and the optimizer.

mod ops;
mod optim;
mod param;
mod tensor;

pub use ops::{conv1d, scaled_dot_product_attention};
pub use optim::{AdamWConfig, GroupRates, Moments, OptimizerState};
pub use param::{ParamGroup, ParamStore, Parameter};
pub use tensor::{grad_enabled, no_grad, Tensor};
