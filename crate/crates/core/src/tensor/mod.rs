//! Dense tensors, a reverse-mode differentiation tape and finite-difference
//! gradient checking.

mod check;
mod graph;
mod real;
mod value;

pub use check::{grad_check, grad_check_multi, GradCheckReport, DEFAULT_STEP};
pub use graph::{cosine_distance, CosineDistance, Gradients, Graph, Var, COSINE_EPS};
pub use real::Real;
pub use value::Tensor;

#[cfg(test)]
mod tests;
