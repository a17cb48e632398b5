//! Neural SDE calibration: local and local-stochastic volatility models with
//! learned hedging control variates and augmented-Lagrangian price bounds.

pub mod autodiff;
pub mod calibrate;
pub mod error;
pub mod hedge;
pub mod market;
pub mod nets;
pub mod rng;
pub mod sde;
pub mod stats;

pub use error::{Error, Result};
