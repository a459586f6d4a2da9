//! Minimal neural-network substrate: autodiff graph, parameter sets, Adam.

pub mod adam;
pub mod graph;
pub mod params;

pub use adam::Adam;
pub use graph::{bce_mean, cosine, dot, mse, Gradients, Graph, ParamId, Var};
pub use params::{init_uniform, ParamSet};
