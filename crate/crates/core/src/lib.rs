//! Multi-treatment crossover trials with interim sample size re-estimation.

// Negated comparisons are how inputs are checked so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod builtin;
pub mod config;
pub mod design;
pub mod error;
pub mod estimators;
pub mod mixed_model;
pub mod numerics;
pub mod sample_size;
pub mod simulator;

pub use error::{Error, Result};
