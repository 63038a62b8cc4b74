//! Tensor-level reverse-mode automatic differentiation.
//!
//! The operator set is exactly what the attribute model and its losses need:
//! matrix products, 3×3 and pointwise convolutions, spatial pooling, softmax
//! variants, entropy and cross-entropy. Gradients are available for any leaf
//! created with `requires_grad`, which covers both model parameters and input
//! images.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use tape::{Gradients, Tape, Var, ENTROPY_FLOOR};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
