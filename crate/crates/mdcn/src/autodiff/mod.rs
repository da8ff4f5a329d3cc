//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Sized for small MLPs and the adversarial losses in this crate: a dynamic
//! tape with elementwise/matrix ops, an Adam optimizer, and a symbolic
//! input-gradient transform that keeps gradient-penalty terms differentiable
//! with respect to network parameters.

mod adam;
mod tape;
mod tensor;

pub use adam::OptimizerState;
pub use tape::{elu, elu_prime, sigmoid, NodeId, Tape};
pub use tensor::{matmul_acc, Tensor};

#[cfg(test)]
mod tests;
