pub mod data;
pub mod error;
pub mod evaluator;
pub mod model;
pub mod numeric;
pub mod objective;
pub mod pinyin;
pub mod scalar;
pub mod textcodec;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
pub use scalar::Scalar;

/// Single-precision model, the default for training and inference.
pub type Model32 = model::Model<f32>;
/// Double-precision model, used for gradient checks.
pub type Model64 = model::Model<f64>;
pub type Tensor32 = numeric::Tensor<f32>;
pub type Tensor64 = numeric::Tensor<f64>;
