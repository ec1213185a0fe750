//! Dense-tensor reverse-mode differentiation.
//!
//! A [`Graph`] records operations as they execute and [`Graph::backward`]
//! replays them in reverse. Only the primitives the model graphs need are
//! provided: matrix product, a handful of elementwise ops with scalar
//! broadcasting, concatenation and slicing, clamping, reduction to a scalar,
//! and [`Graph::stop_gradient`].

mod check;
mod graph;
mod tensor;

pub use check::{grad_check, GradCheck};
pub use graph::{Elementwise, Graph, Var};
pub use tensor::Tensor;
