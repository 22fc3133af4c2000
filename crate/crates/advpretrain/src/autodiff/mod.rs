//! From-scratch reverse-mode automatic differentiation.
//!
//! Dense f64 tensors ([`Tensor`]), a single-sweep gradient tape
//! ([`Tape`]) with the primitive ops every loss in the crate is built
//! from, fast-vs-reference convolution kernels ([`conv`]), and the
//! finite-difference oracle ([`finite_diff_gradient`]) that referees all
//! analytic gradients.

pub mod conv;
mod fd;
mod tape;
mod tensor;

pub use fd::{
    directional_grad_diff, finite_diff_gradient, gradient_rel_err, input_gradient, FD_DEFAULT_H,
};
pub use tape::{matmul_into, Tape, Var};
pub use tensor::Tensor;
