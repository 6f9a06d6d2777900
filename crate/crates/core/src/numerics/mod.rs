//! Dense f64 kernel: tensors, a reverse-mode tape, Adam, finite-difference
//! gradient checking, and the named-tensor checkpoint format.

mod adam;
mod checkpoint;
mod gradcheck;
mod sparse;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_named, save_named, ParamStore};
pub use gradcheck::{grad_check, grad_check_slots, GradCheckReport};
pub use sparse::SparseMatrix;
pub use tape::{attention_probs, Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("non-finite gradient for parameter `{name}` at flat index {index}")]
    NonFiniteGradient { name: String, index: usize },
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NumericsError>;
