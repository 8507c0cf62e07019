//! Dense tensors with eager reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: it carries exactly the operations the
//! decoder needs, each with an exact backward pass. Values are computed as
//! the graph is built, and [`Graph::backward`] walks the nodes in reverse
//! creation order.
//!
//! ```
//! use eccm::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let w = g.leaf(Tensor::from_f64(&[2], &[1.0, -3.0]).unwrap());
//! let sq = g.mul(w, w).unwrap();
//! let loss = g.sum(sq).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap().data(), &[2.0, -6.0]);
//! ```

mod check;
mod graph;
pub mod kernels;
mod nn;
mod tensor;


pub use check::{check_gradients, relative_error, GradCheckReport};
pub use graph::{CustomOp, Gradients, Graph, Var};
pub use tensor::{Real, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not describe {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: axis {axis:?} invalid for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: Vec<usize>,
        rank: usize,
    },
    #[error("{op}: index {index} out of range for length {len}")]
    OutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("attention mask row {row} has no admissible entry")]
    EmptyMaskRow { row: usize },
    #[error("backward needs a one-element root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
}
