//! Plasmode simulation engine for objective, pre-specified selection of
//! causal effect estimators.
//!
//! The crate builds data-generating processes from a real dataset, runs a
//! grid of candidate TMLE-family estimators over seeded Monte Carlo
//! iterations, scores them and applies a two-step constrained selection
//! scheme that yields a statistical analysis plan report.

// Negated float comparisons are deliberate: NaN must fail the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod harness;
pub mod learners;
pub mod ltmle;
pub mod metrics;
pub mod plasmode;
pub mod rng;
pub mod stats;
pub mod superlearner;
pub mod tmle;
pub mod twostage;

pub use error::{Error, Result};
pub use rng::SeededStream;
