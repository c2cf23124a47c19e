//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] is recorded fresh for every forward pass. Parameters enter it
//! through [`ModelParams::bind`], the loss is reduced to a scalar [`Var`], and
//! [`Tape::backward`] fills gradients that [`BoundParams::grads`] reads back.

mod check;
mod kernels;
mod params;
mod real;
mod tape;
mod tensor;

pub use check::{finite_diff_check, FdReport};
pub use params::{BoundParams, Gradients, ModelParams, Param, ParamGroup};
pub use real::{gemm, MatRef, Real};
pub use tape::{Tape, Var};
pub use tensor::{numel, one_hot, strides, Tensor};

#[cfg(test)]
mod tests;
