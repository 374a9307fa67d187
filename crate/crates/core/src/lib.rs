//! Ensemble-model predictive control for a two-regime district heating plant.
//!
//! The crate is organised bottom-up:
//!
//! - [`stats`]: benchmark statistics and Mahalanobis (T²) scoring.
//! - [`recmodel`]: GRU experts with reverse-mode differentiation.
//! - [`ensemble`]: output combination and expert weighting strategies.
//! - [`plant`]: synthetic thermal plant, scenarios, excitation signals.
//! - [`trainer`]: expert identification by truncated backpropagation.
//! - [`optim`]: projected-gradient solver shared by MPC and MHE.
//! - [`mpc`]: economic receding-horizon controller.
//! - [`mhe`]: per-expert moving-horizon state estimation.
//! - [`harness`]: closed-loop simulation, metrics, comparisons and exports.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod data;
pub mod ensemble;
pub mod error;
pub mod harness;
pub mod io;
pub mod mhe;
pub mod mpc;
pub mod optim;
pub mod plant;
pub mod recmodel;
pub mod stats;
pub mod trainer;

pub use error::{Error, Result};
