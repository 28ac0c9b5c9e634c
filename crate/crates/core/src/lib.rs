//! Joint food classification and portion regression with soft parameter
//! sharing, cross-domain feature adaptation and a from-scratch autodiff core.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod layers;
pub mod metrics;
pub mod multitask;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
