//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] is rebuilt for every forward pass. Model code records
//! primitives on it, then calls [`Tape::backward`] on a scalar node to get
//! exact gradients for every differentiable leaf.

mod check;
mod tape;
mod tensor;

pub use check::{finite_difference_check, FdReport};
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected a rank-2 tensor, got shape {shape:?}")]
    Rank { op: &'static str, shape: Vec<usize> },
    #[error("{op}: index {index} out of range for length {len}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{0}: no inputs")]
    Empty(&'static str),
    #[error("shape {shape:?} does not hold {len} elements")]
    Construct { shape: Vec<usize>, len: usize },
    #[error("backward needs a one-element root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("function value is not finite at coordinate {coordinate}")]
    NonFinite { coordinate: usize },
}
