//! Minimal reverse-mode automatic differentiation for the Petri substrate.
//!
//! A [`Tape`] records a straight-line program over [`Tensor`] values. Nodes are
//! appended in evaluation order, so the node index is already a topological
//! order and [`Tape::backward`] is a single reverse sweep. The op set is
//! deliberately small: elementwise arithmetic with limited broadcasting, dense
//! matmul, a fused 3x3 neighborhood projection over toroidal grids, row
//! scatter, column slicing/concatenation, softmax, cosine similarity, clip,
//! log and a full sum.
//!
//! [`Adam`] implements the bias-corrected Adam update over a list of
//! parameter tensors.

mod adam;
mod error;
mod ops;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::GradError;
pub use ops::{GridDims, Op};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, GradError>;
