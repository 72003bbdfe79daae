//! Combined-compliers average causal response estimation with multiple
//! binary instruments, plus tools to probe limited monotonicity.

// `!(x > 0.0)` is used on purpose so NaN falls into the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod dml;
pub mod error;
pub mod estimators;
pub mod learners;
pub mod limtest;
pub mod rng;
pub mod sim;
pub mod stats;
pub mod types;

pub use error::{Error, Result};
