//! Dense `f64` tensors with a dynamic reverse-mode tape.
//!
//! A forward pass records operations on a fresh [`Tape`]; [`Tape::backward`]
//! then produces gradients for every differentiable leaf. Parameters live in a
//! [`ParamSet`] between passes and are bound onto each new tape.

mod error;
mod params;
mod tape;
mod tensor;

pub mod checkpoint;
pub mod finite_diff;
pub mod optim;

pub use error::{Result, TensorError};
pub use optim::{sgd_step, Adam};
pub use params::{Bound, GradSet, ParamSet};
pub use tape::{concat, stack, Gradients, Tape, Var};
pub use tensor::Tensor;
