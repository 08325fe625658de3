//! A small reverse-mode differentiation substrate.
//!
//! Forward operators are recorded on a [`Tape`]; [`Tape::backward`] walks
//! the tape in reverse and returns gradients for every [`ParamStore`] entry
//! that the loss depends on. Everything is `f64` and row-major; operators
//! work on 2-D `[rows, cols]` tensors where a row is one item of a batch.

mod kernels;
mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{Adam, Optimizer, Sgd};
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use tape::{chol_len, BatchNormMode, BatchNormParams, LstmWeights, RunningStatUpdate, Tape, Var, LOG_DIAG_CLAMP};
pub use tensor::Tensor;
