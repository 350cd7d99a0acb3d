pub mod data;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod transfer;

pub use tensor::{Tensor, TensorError};
