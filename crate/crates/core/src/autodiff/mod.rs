//! Dense/sparse matrices and a reverse-mode tape over them.

pub mod check;
mod matrix;
mod sparse;
mod tape;

pub use check::{finite_diff_check, numeric_gradient, GradientCheck};
pub use matrix::DenseMatrix;
pub(crate) use matrix::dot;
pub use sparse::SparseCsr;
pub use tape::{CustomBackward, Gradients, Tape, Var};
