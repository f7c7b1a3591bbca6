pub mod complexity;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod ops;
pub mod ratio;
pub mod selftest;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use ratio::Ratio;
pub use tensor::{Element, Tensor};
