//! Synthetic data-generating processes: the proximal causal-inference
//! benchmark and a linear-Gaussian NPIV family with a known spectral oracle.

pub mod links;
pub mod npiv;
pub mod proximal;

pub use links::LinkFunction;
pub use npiv::{generate_linear_npiv, LinearNpivParams};
pub use proximal::{generate_proximal, sample_bridge_inputs, ProximalParams};
