//! Desk-scale sparse mixture-of-experts laboratory.
//!
//! Implements competition-based SMoE training with scheduled router
//! distillation, four baseline routing strategies, a tiny character-level
//! transformer to exercise them, and a statistical workbench that measures
//! MLE convergence rates for competition-gated Gaussian mixtures.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod routing;
pub mod stats;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
