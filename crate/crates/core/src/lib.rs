//! Scan-specific unsupervised parameter estimation for quantitative MRI.
//!
//! The crate synthesizes multi-echo and MR-fingerprinting data from physics
//! models, fits voxel-wise baselines, and trains a small residual network
//! per dataset whose loss compares physics-resynthesized signals against
//! the measured input.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adam;
pub mod baselines;
pub mod config;
pub mod corrupt;
pub mod error;
pub mod experiment;
pub mod gradsuite;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod phantom;
pub mod signal;
pub mod stack;
pub mod subspace;
pub mod train;

pub use error::{QfitError, Result};
