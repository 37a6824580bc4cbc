pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experts;
pub mod kernels;
pub mod model;
pub mod routing;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
