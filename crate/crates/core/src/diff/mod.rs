//! Differentiable computation substrate.
//!
//! A small, auditable reverse-mode engine over a fixed primitive catalog:
//! forward ops are recorded into a [`Graph`] tape and replayed in reverse to
//! accumulate gradients. Training runs at `f32`; gradient checks run the same
//! code at `f64` against central finite differences.

mod gradcheck;
mod graph;
mod gru;
mod tensor;

pub use gradcheck::{assert_grad_check, grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, NodeId};
pub use gru::{gru_cell, GruParams};
pub use tensor::Tensor;

use thiserror::Error;

/// Scalar element type of tensors. Implemented for `f32` and `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::fmt::Debug
    + Send
    + Sync
    + 'static
{
    fn of_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Numerically stable logistic function.
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: shape error: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("gradient check rejected: {0}")]
    NonDifferentiable(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
}

pub type Result<T> = std::result::Result<T, DiffError>;
