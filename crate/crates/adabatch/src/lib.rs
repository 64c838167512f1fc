//! Sparse stochastic optimization toolkit.
//!
//! The crate trains linear models on sparse data with per-coordinate
//! gradient merging: alongside plain mini-batch averaging it implements a
//! support-aware average that divides each coordinate by the number of batch
//! members actually containing it, the matching deterministic reconditioners,
//! adaptive per-coordinate steps, variance-reduced epochs, and lock-free
//! parallel variants. A statistics module provides closed-form and
//! brute-force oracles for the moments of support-restricted averages, used
//! heavily by the test suite.

pub mod aggregation;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod moments;
pub mod parallel;
pub mod sgd;
pub mod svrg;
pub mod sparse;
pub mod synth;

pub use error::{Error, Result};
