//! Dense arrays and a reverse-mode differentiation engine.
//!
//! [`Tensor`] is a plain row-major array. Differentiable computations are
//! recorded on a [`Tape`]; leaves created with `requires_grad` receive
//! gradients from [`Tape::backward`]. A tape is generic over one [`Real`]
//! type, so precisions never mix within a graph. Training defaults to
//! [`DefaultReal`] (`f32`, or `f64` with the `double` feature); gradient
//! checks instantiate the engine at `f64` directly.

mod array;
mod broadcast;
pub mod checkpoint;
mod gradcheck;
mod params;
mod real;
mod tape;

pub use array::Tensor;
pub use gradcheck::{grad_check, grad_check_at, GradCheck};
pub use params::{Param, ParamId, ParamStore};
pub use real::{gemm, MatLayout, Real};
pub use tape::{Gradients, Tape, Var};

#[cfg(not(feature = "double"))]
pub type DefaultReal = f32;
#[cfg(feature = "double")]
pub type DefaultReal = f64;
