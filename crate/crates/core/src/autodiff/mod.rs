//! Dense `f64` arrays and a reverse-mode tape over the primitives the
//! classifier and its losses are built from.
//!
//! Every loss in this crate is assembled from [`Tape`] operations, so
//! [`Tape::grad`] yields exact gradients for any registered parameter.

mod array;
mod kernels;
mod tape;

pub use array::Array;
pub use tape::{pairwise_sq_dists, softmax_rows, BatchStats, Tape, Var, LOG_FLOOR};
