//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] is a single-use tape: builders push operation nodes during
//! the forward pass, [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients for every node that requires them. Values are
//! two-dimensional `ndarray` matrices; batches of token sequences are
//! stored row-blocked as `(samples * seq_len) x dim` with sample blocking
//! handled by dedicated ops.

mod gradcheck;
mod graph;

pub use gradcheck::{check_gradients, numerical_grad, GradCheckReport, DEFAULT_EPS};
pub use graph::{DegenerateRows, Graph, NodeId};
