//! Dense double-precision tensors with a tape-based reverse mode.
//!
//! Model code records primitives on a [`Tape`]; [`Tape::backward`] then
//! walks the tape in exact reverse order. Parameters live in a
//! [`ParamStore`]; frozen parameters enter the tape as constants, so they
//! never receive a gradient and the optimizer never touches them.

mod checkpoint;
pub mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{frozen_blob, read_checkpoint, write_checkpoint, CheckpointError, CHECKPOINT_MAGIC};
pub use optim::Sgd;
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("softmax temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("index {index} out of range for {len} rows in {op}")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },
    #[error("segment {0} has no members")]
    EmptySegment(usize),
    #[error("duplicate parameter name {0:?}")]
    DuplicateParameter(String),
}
