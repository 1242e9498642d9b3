//! Dense real arrays and reverse-mode differentiation for the fixed set of
//! primitives the pipeline uses.
//!
//! Forward kernels live in [`ops`] as plain functions so inference can run
//! without recording anything. [`Tape`] records the same kernels together
//! with the values their backward rules need.

mod array;
pub mod ops;
mod real;
mod tape;

pub use array::DenseArray;
pub use ops::SeparableKernel;
pub use real::Real;
pub use tape::{Gradients, NodeId, Tape};
