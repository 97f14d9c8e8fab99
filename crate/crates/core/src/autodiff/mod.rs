//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s during the
//! forward pass; [`Var::backward`] then sweeps the tape in reverse. Tapes
//! are rebuilt for every training step. Broadcasting is explicit:
//! [`Var::add_row`] and [`Var::add_col`] are the only broadcasting ops and
//! every other binary op requires equal shapes.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, relative_error, RELATIVE_ERROR_FLOOR};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("log of non-positive value {0}")]
    NonPositiveLog(f64),
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("data of length {len} does not fit shape {shape:?}")]
    BadShape { shape: Vec<usize>, len: usize },
}
