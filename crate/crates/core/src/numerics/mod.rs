//! Dense tensors with reverse-mode gradients.
//!
//! Only the closed set of operations the encoder and objectives need is
//! provided. Every op records itself on a [`Tape`]; [`Tape::backward`] replays
//! the tape in reverse. All values are checked for finiteness on creation.
//!
//! Training runs the tape at `f32`. The same generic op code runs at `f64` for
//! [`grad_check`], whose central differences would otherwise be swamped by
//! `f32` roundoff at `eps = 1e-3`.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub(crate) use tensor::{gemm_nn, gemm_nt, gemm_tn};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point element type usable on a tape.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: dimension mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: degenerate input: {detail}")]
    Degenerate { op: &'static str, detail: String },
    #[error("{op}: index {index} out of range for {table} with {size} rows")]
    Index { op: &'static str, table: String, index: usize, size: usize },
    #[error("backward: {0}")]
    Contract(String),
    #[error("{op} (node {node}): non-finite value produced")]
    NonFinite { op: &'static str, node: usize },
}

pub type Result<T, E = NumericsError> = std::result::Result<T, E>;
