//! Forward and backward numeric kernels used by the graph.

pub mod array;
pub mod conv;
pub mod norm;
pub mod spatial;
