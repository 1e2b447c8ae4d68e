pub mod cli;
pub mod config;
pub mod distiller;
pub mod error;
pub mod evalkit;
pub mod losses;
pub mod mixer;
pub mod nets;
pub mod optim;
mod plot;
pub mod simworld;
pub(crate) mod nn;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
