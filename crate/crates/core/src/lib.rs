pub mod activation;
pub mod arch;
pub mod check;
pub mod conv;
pub mod data;
mod error;
mod gemm;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod runtime;
pub mod tensor;
pub mod train;
pub mod xtsr;

pub use activation::Activation;
pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{DType, Dims, Scalar, Tensor4};
