//! Dense tensors, the reverse-mode tape, and the finite-difference oracle.

mod dense;
pub mod gradcheck;
pub mod kernels;
mod tape;

pub use dense::Tensor;
pub use tape::{memstats, Gradients, Graph, SegmentBody, SegmentOutputs, Var};

#[cfg(test)]
mod tests;
