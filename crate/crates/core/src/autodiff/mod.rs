//! Minimal define-by-run reverse-mode autodiff over 4D tensors.
//!
//! Supports exactly what the field estimator needs: 2D convolution,
//! elementwise arithmetic, clamped `exp`, (leaky) ReLU, average pooling and
//! sum/mean reductions, plus an Adam optimizer.

mod adam;
mod conv;
mod graph;
mod real;
mod tensor;

#[cfg(test)]
mod tests;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use graph::{Graph, Var, DIV_EPS, EXP_CLAMP};
pub use real::Real;
pub use tensor::Tensor4;
