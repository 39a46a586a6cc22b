//! Dense `f64` tensors, a dynamic reverse-mode tape and AdamW.
//!
//! Every forward pass records onto a fresh [`Tape`]. Parameters live in a
//! [`ParamStore`] outside the tape; [`Tape::backward`] accumulates gradients
//! into the store for every parameter flagged `requires_grad`.

pub mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{AdamW, AdamWConfig};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("contract violated: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Clamp used by every log inside a loss.
pub const LOG_EPS: f64 = 1e-12;

/// Numerically stable softmax of a plain slice.
pub fn softmax(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(TensorError::Domain { op: "softmax", msg: "empty input".into() });
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
