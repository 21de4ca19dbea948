pub mod augment;
pub mod blocks;
pub mod classifier;
pub mod config;
pub mod data_io;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod image;
#[cfg(test)]
mod invariants;
pub mod nn;
pub mod pipeline;
pub mod proposer;
pub mod tensor;
pub mod tiling;
pub mod workflow;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
