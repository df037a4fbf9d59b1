//! Deterministic tensors with tape-based reverse-mode differentiation.

mod array;
pub mod kernels;
mod scalar;
mod tape;

pub use array::Tensor;
pub use kernels::Exec;
pub use scalar::{DType, Scalar};
pub use tape::{ParamId, Tape, Var};

pub use tape::log_sum_exp;
