//! Minimal reverse-mode differentiable array engine.

mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, KinkFlag};
pub use graph::{Gradients, Graph, PoolAxis, Var};
pub use tensor::{numel, Real, Tensor};
