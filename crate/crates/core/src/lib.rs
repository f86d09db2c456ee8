//! Federated low-rank Gaussian-process estimation.
//!
//! Workers each hold a shard of spatial observations and share a small set
//! of knots. The estimators here fit the variational mean and covariance
//! of the knot process, the regression coefficients, the noise precision
//! and the Matérn covariance parameters, either synchronously or through
//! an asynchronous server/worker protocol.

pub mod baselines;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernel;
pub mod linalg;
pub mod lowrank;
pub mod protocol;
pub mod sync;

#[cfg(test)]
pub(crate) mod test_support;

pub use error::{Error, Result};
