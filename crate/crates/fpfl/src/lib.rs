//! Simulator and library for group-fair private federated learning.
//!
//! The crate trains small neural networks under fairness constraints with
//! the method of differential multipliers, both centrally and in a
//! simulated federated protocol where per-user statistics are clipped,
//! summed by a sum-only aggregator, and privatized with the Gaussian
//! mechanism calibrated by a Renyi-DP accountant.

pub mod config;
pub mod constrained;
pub mod datasets;
pub mod dp;
pub mod error;
pub mod fairness;
pub mod fed;
pub mod nn;
pub mod vecops;

pub use error::{Error, Result};
