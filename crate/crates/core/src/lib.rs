//! Reduced rank estimation of cointegrated vector error correction models.
//!
//! The crate covers the sample and population generalized eigenproblems,
//! fixed-rank and weighted reduced rank estimators, sequential rank
//! selection with bootstrap critical values, the closed-form asymptotic
//! bias and covariance under a misspecified rank, samplers for the limit
//! laws and Monte Carlo harnesses that drive the `coint-rrr` binary.

// negated comparisons such as `!(x > 0.0)` also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod asymcov;
pub mod error;
pub mod estimate;
pub mod experiments;
pub mod generators;
pub mod matops;
pub mod model;
pub mod rank;
pub mod serde_mat;
pub mod simulate;
pub mod stats;

pub use error::{Error, Result};
