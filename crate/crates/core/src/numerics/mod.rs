//! Dense linear algebra, activations, AdamW and gradient checking.

mod activation;
mod adamw;
mod gradcheck;
mod matrix;

pub use activation::{logsumexp, sigmoid, softmax, softplus, tanh_gate, tanh_gate_grad, try_softmax};
pub use adamw::{AdamWConfig, AdamWState, ParamSet};
pub use gradcheck::{grad_check, rel_error};
pub use matrix::{dot, norm, Matrix};

/// Dense real vector.
pub type Vector = Vec<f64>;
