//! Covariate-balancing weights for matrix-valued treatments and the causal
//! effect estimators built on them.

pub mod balance;
pub mod basis;
pub mod broadcast;
pub mod data;
pub mod error;
pub mod moments;
pub mod parametric;
pub mod pipeline;
pub mod screening;
pub mod simulation;

pub use error::{Error, Result};

/// Version of this library, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
