//! Bayesian optimization over conditional machine-learning pipeline spaces.

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod benchmark;
pub mod bo;
pub mod config;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod gp;
pub mod interpreter;
pub mod metalearn;
pub mod metrics;
pub mod objective;
pub mod optimize;
pub mod persist;
pub mod rng;
pub mod space;
pub mod structure;
pub mod suite;

pub use error::{Error, Result};
