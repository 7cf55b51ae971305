//! Dense tensors with reverse-mode differentiation.
//!
//! A [`Tape`] records eagerly evaluated operations; [`Tape::backward`]
//! returns gradients for every differentiable leaf, and
//! [`Gradients::params`] groups them by [`ParamId`].

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, GradCheck, ParamCheck};
pub use params::{Bound, CheckpointError, ParamId, ParamStore, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("buffer of length {len} does not fill shape {shape:?}")]
    BadBuffer { shape: Vec<usize>, len: usize },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    Axis { op: &'static str, axis: usize, shape: Vec<usize> },
    #[error("slice [{start}, {start}+{len}) on axis {axis} out of range for shape {shape:?}")]
    Slice { axis: usize, start: usize, len: usize, shape: Vec<usize> },
    #[error("{op}: index {index} out of range (len {len})")]
    Index { op: &'static str, index: usize, len: usize },
    #[error("{0}: no inputs")]
    Empty(&'static str),
    #[error("loss must have one element, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}
