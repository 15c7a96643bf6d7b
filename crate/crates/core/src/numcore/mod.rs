//! Reverse-mode differentiable array core.
//!
//! [`Graph`] records operations on [`Array`] values; [`Graph::backward`]
//! returns gradients for every leaf. Each op carries a hand-written backward
//! rule, and [`gradcheck`] verifies them against central differences.

mod array;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod scalar;

pub use array::Array;
pub use gradcheck::{grad_check, grad_check_at, Coord, GradCheckReport};
pub use graph::{CustomOp, Gradients, Graph, OpKind, VarId};
pub use scalar::{log_add_exp, log_sum_exp, Scalar};
