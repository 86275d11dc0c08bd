//! Distributed zeroth-order gradient tracking for stochastic MPECs.
//!
//! Agents on an undirected network each hold a local copy of the leader
//! decision and a gradient tracker. Every iteration they estimate the
//! gradient of the smoothed implicit objective from two function values,
//! solve (exactly or approximately) the lower-level variational inequality
//! at both perturbed points, and mix the results with their neighbours
//! through a doubly stochastic matrix.
//!
//! Module map:
//!
//! - [`network`]: topologies, Metropolis weights, spectral gap, mixing.
//! - [`smoothing`]: sphere sampling and the central-difference estimator.
//! - [`lower_level`]: stochastic approximation and projection solvers.
//! - [`problems`]: the problem interface and the built-in instances.
//! - [`gt_core`]: single-stage and two-stage gradient-tracking iterations.
//! - [`harness`]: experiment plans, metrics, CSV output and validation.

pub mod error;
pub mod exec;
pub mod gt_core;
pub mod harness;
pub mod lower_level;
pub mod network;
pub mod problems;
pub mod rng;
pub mod smoothing;

pub use error::{Error, Result};
pub use exec::Execution;
