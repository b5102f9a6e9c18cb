//! Random-multiplication integer-valued autoregressions (RMINAR):
//! simulation, stationarity and tail analysis, four-stage weighted least
//! squares estimation, diagnostics, and replication studies.
//!
//! The model family drives an AR(p) recursion with iid integer-valued
//! random coefficients drawn fresh each step. Three classes are covered:
//! N0-valued additive, Z-valued additive, and a multiplicative-error
//! variant. Every class is strictly stationary and ergodic whenever each
//! coefficient law puts mass at zero, including infinite-mean regimes,
//! and the staged WLS estimator stays consistent there.

// Parameter validation uses negated comparisons (`!(x > 0.0)`) on purpose:
// they reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod diagnostics;
pub mod distributions;
pub mod error;
pub mod estimation;
pub mod mc_study;
pub mod model;
pub mod numerics;
pub mod operators;
pub mod rng;
pub mod theory;

pub use error::{Error, Result};
