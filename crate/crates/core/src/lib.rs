pub mod autodiff;
pub mod error;

pub use error::{Error, Result, Warning};
pub mod data;
pub mod seeds;
pub mod model;

#[cfg(test)]
mod testutil;
pub mod augment;
pub mod ensemble;
pub mod losses;
pub mod eval;
pub mod synthgen;
pub mod trainer;
