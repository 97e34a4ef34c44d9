//! Desk-scale testbed for accelerating guided diffusion sampling: sparse
//! per-timestep guidance schedules found by an evolutionary search, and
//! region-adaptive low-rank calibrated feature caching, with analytically
//! tractable models so every pipeline can be checked against closed-form or
//! brute-force references.

// `!(x > 0)`-style guards intentionally reject NaN along with the
// out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod blocknet;
pub mod cache;
pub mod calib;
pub mod config;
pub mod deviation;
pub mod error;
pub mod evo;
pub mod exp;
pub mod guidance;
pub mod ledger;
pub mod metrics;
pub mod mixture;
pub mod model;
pub mod ranksearch;
pub mod report;
pub mod sampler;
pub mod schedule;

pub use error::{Error, Result};
