pub mod adapters;
pub mod autograd;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod scoring;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
