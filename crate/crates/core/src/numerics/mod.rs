//! Dense `f64` tensors, reverse-mode differentiation and the primitive ops.

mod gemm;
mod ops;
mod rng;
mod tensor;

pub use ops::ROPE_BASE;
pub use rng::RngState;
pub use tensor::{finite_checks_enabled, set_finite_checks, Tensor};

