//! Deterministic dense tensors, counter-based randomness and reverse-mode
//! differentiation. Everything is `f64` and every reduction runs in a fixed
//! order, so identical inputs give bit-identical outputs.

pub mod flops;
mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod optim;
mod params;
mod rng;
mod tensor;

pub use gradcheck::{grad_check, grad_check_coords, grad_check_with, rel_err, CheckReport, FD_STEP, REL_FLOOR};
pub use graph::{Gradients, Graph, Var};
pub use optim::Adam;
pub use params::{BoundParams, ParamStore};
pub use rng::{gaussian, RngStream};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("NaN produced by {op}")]
    NonFinite { op: &'static str },
    #[error("{0}")]
    Invalid(String),
}
