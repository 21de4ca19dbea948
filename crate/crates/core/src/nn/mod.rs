//! Minimal neural-network runtime: kernels, a differentiable graph, parameter
//! storage and optimization.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod params;

pub use graph::{ConvSpec, Grads, Graph, Var};
pub use params::{ParamBuilder, ParamId, ParamStore};
