//! Meta soft label correction for training classifiers under label noise.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod corrector;
pub mod data;
pub mod error;
pub mod experiment;
pub mod layers;
pub mod meta;
pub mod models;
pub mod noise;
pub mod optim;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod train;

#[cfg(test)]
mod testing;

pub use error::{Error, Result};
