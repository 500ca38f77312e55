//! Dense tensors, the differentiation record, the finite-difference gradient
//! oracle and the `D2A1` file format.

mod gradcheck;
mod graph;
pub mod io;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Graph, Unary, Var};
pub use tensor::Tensor;

pub(crate) use graph::softmax_rows;

#[cfg(test)]
mod tests;
