//! Battery pack simulation with a sampling-based power-sharing optimizer.
//!
//! A pack of heterogeneous cells, each behind its own converter, must serve
//! a demanded output power. How the demand is split (the per-cell sharing
//! ratios) trades conversion losses against charge and temperature balance.
//! This crate models the electro-thermal pack dynamics, parameterizes the
//! split with a two-parameter blending policy, and tunes those parameters
//! each control step by ensemble Kalman inversion of a penalized rollout
//! cost, inside a receding-horizon closed loop.
//!
//! Module map:
//! - [`pack`]: cell and pack models, the one-step plant update
//! - [`policy`]: the sharing policy and its parameter projection
//! - [`objective`]: constraint residuals, barriers, and the rollout cost
//! - [`enki`]: the ensemble inversion solver
//! - [`oracle`]: brute-force grid references that certify the solver
//! - [`profile`], [`config`]: demand profiles and scenario configuration
//! - [`sim`]: the closed loop and its CSV/JSON logging
//! - [`bench`]: solve-time measurement over pack and ensemble sizes
//!
//! Everything is deterministic for a given seed, including parallel
//! ensemble evaluation.

pub mod bench;
pub mod config;
pub mod enki;
pub mod error;
pub mod objective;
pub mod oracle;
pub mod pack;
pub mod policy;
pub mod profile;
pub mod sim;

pub use error::{Error, Result};
