//! Dense-matrix reverse-mode automatic differentiation.
//!
//! Values live in [`Matrix`]; trainable leaves live in a [`ParamStore`]
//! that outlives any single [`Tape`]. A forward pass records primitives on
//! a fresh tape, and [`Tape::backward`] accumulates gradients into the
//! store.

mod gradcheck;
mod matrix;
mod param;
mod sparse;
mod tape;

pub use gradcheck::{
    grad_check, grad_check_floor, relative_error, relative_error_floor, GradCheckReport, DEFAULT_STEP, RELATIVE_FLOOR,
};
pub use matrix::Matrix;
pub use param::{ParamId, ParamStore, Parameter};
pub use sparse::SparseMatrix;
pub use tape::{softmax_in_place, softmax_rows, Tape, Var, LOG_CLAMP};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },
    #[error("numerical fault: {op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a 1x1 loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("tape was already consumed by a previous backward call")]
    TapeConsumed,
    #[error("invalid argument to {op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
}
