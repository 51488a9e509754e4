//! Deterministic dense tensors with reverse-mode differentiation, gradient
//! checking, small symmetric eigenvalue tools and emulated reduced precision.

mod check;
mod error;
mod kernels;
pub mod linalg;
pub mod precision;
pub mod tape;
mod tensor;

pub use check::finite_diff_check;
pub use error::{NumericsError, Result};
pub use linalg::{power_iteration_extremes, symmetric_eigenvalues, Extremes, Matrix};
pub use precision::{quantize, PrecisionMode};
pub use tape::{Gradients, LeafKind, Op, ParamId, Tape, Var};
pub use tensor::Tensor;
