//! Minimal dense-tensor library with reverse-mode automatic differentiation
//! and an Adam optimizer, sized for desk-scale f64 experiments.

pub mod checkpoint;
pub mod error;
pub mod fd;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use checkpoint::{atomic_write, load_checkpoint, save_checkpoint};
pub use error::{NumericError, Result};
pub use fd::{finite_difference_grad, max_relative_error};
pub use optim::{AdamConfig, AdamState, ParamBinding, ParamStore, Parameter};
pub use tape::{logsumexp_slice, softmax_vec, Gradients, Tape, VarId};
pub use tensor::Tensor;
