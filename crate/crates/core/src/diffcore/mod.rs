//! Reverse-mode differentiation over small dense tensors, plus the losses
//! and optimizer the training loops need.

mod adam;
mod graph;
mod ssim;
mod tensor;

pub use adam::{AdamConfig, AdamState, Parameterized};
pub use graph::{Gradients, Graph, Var};
pub use ssim::{gaussian_window, ms_ssim, ms_ssim_batch, MsSsimConfig};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("backward root must be scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("non-finite value in {what}")]
    NonFinite { what: String },
    #[error("{op}: value {value} outside accepted range [{lo}, {hi}]")]
    OutOfRange {
        op: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("non-finite gradient for parameter `{param}` at step {step}")]
    NonFiniteGradient { param: String, step: u64 },
    #[error("optimizer: {0}")]
    Optimizer(String),
}

#[cfg(test)]
mod tests;
