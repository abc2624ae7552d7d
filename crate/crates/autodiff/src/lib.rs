//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! Values live on a [`Tape`]; parameters live in a [`ParamStore`] and enter a
//! tape as leaves via [`Tape::param`]. After [`Tape::backward`], gradients are
//! copied back with [`Tape::write_param_grads`] and applied by [`Adam`].

pub mod adam;
pub mod checkpoint;
mod conv;
pub mod error;
pub mod fd;
pub mod params;
pub mod real;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CheckpointWriter};
pub use error::{AutodiffError, Result};
pub use fd::{check_param_grads, FdConfig, FdReport};
pub use params::{ParamId, ParamStore};
pub use real::{DType, Real};
pub use tape::{Activation, BinaryKind, OpTag, ReduceKind, Tape, Var};
pub use tensor::Tensor;
