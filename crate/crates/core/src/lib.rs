//! Recursive Bayesian filtering as a learning engine.
//!
//! The crate treats parameter estimation and online learning as a Kalman
//! filtering problem: beliefs are Gaussians `(mean, P)`, updates are driven
//! by innovations, and the covariance evolves by Riccati recursions. On top
//! of the core filter sit:
//!
//! - structured covariance representations (dense, block-diagonal,
//!   low-rank plus diagonal via Woodbury, Kronecker pairs),
//! - the Fisher-information / natural-gradient view of the Kalman gain,
//! - Koopman lifting with EDMD estimation and exact linear filtering in
//!   lifted coordinates,
//! - activation-level innovation correction for a toy softmax decoder,
//! - stability diagnostics (contraction identity, persistent excitation,
//!   Lyapunov traces, robustness margins),
//! - a seeded benchmark harness with filtering and first-order baselines.

pub mod bench;
pub mod config;
pub mod covariance;
pub mod diff;
pub mod error;
pub mod filter;
pub mod geometry;
pub mod koopman;
pub mod linalg;
pub mod model;
pub mod observer;
pub mod rng;
pub mod stability;
pub mod verify;

pub use error::{Error, Result};
