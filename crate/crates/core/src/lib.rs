pub mod autodiff;
pub mod bench;
pub mod crosswkv;
pub mod diffusion;
pub mod error;
pub mod optim;
pub mod tensor;
pub mod wkv;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
