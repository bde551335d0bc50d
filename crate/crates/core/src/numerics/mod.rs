//! Dense `f64` tensors, eager ops, and a define-by-run gradient tape.

pub mod io;
mod kernels;
pub mod ops;
mod tape;
mod tensor;

pub use ops::{conv2d, matmul, softmax};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
