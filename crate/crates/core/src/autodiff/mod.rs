//! Reverse-mode automatic differentiation over dense fp64 tensors.

mod gradcheck;
pub(crate) mod kernels;
mod tape;

pub use gradcheck::{grad_check, grad_check_many};
pub use tape::{Gradients, Tape, Var};

/// Max-shifted softmax of a plain slice.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let mut out = values.to_vec();
    kernels::softmax_in_place(&mut out);
    out
}

pub fn sigmoid(v: f64) -> f64 {
    kernels::sigmoid(v)
}
