//! Per-entry time interpolants for flow-matching generative models: the
//! interpolant and its drift compensation, a small regressor, training and
//! sampling loops, and 2D path-space diagnostics.

pub mod data;
pub mod error;
pub mod interpolant;
pub mod metrics;
pub mod pathspace;
pub mod regressor;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use rng::RandomSource;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
