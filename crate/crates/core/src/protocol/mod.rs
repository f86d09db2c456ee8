//! Asynchronous server/worker protocol.
//!
//! Parameters travel from the server to workers stamped with an iteration
//! index and sub-step label; workers answer with local quantities carrying
//! the same stamps. The server aggregates a sub-step once enough fresh
//! quantities have arrived, optionally correcting, reweighting and
//! smoothing to compensate for staleness.

mod buffer;
mod server;
mod step;
mod weights;
pub mod wire;
mod worker;

#[cfg(test)]
mod tests;

pub use buffer::WorkerBuffer;
pub use server::{corrected_gradient, moving_average, AggregationRecord, Server};
pub use step::StepLabel;
pub use weights::adaptive_weights;
pub use worker::{worker_compute, Worker};

use crate::error::{Error, Result};
use crate::lowrank::ModelParams;
use crate::sync::{LocalQuantity, StepSize};

/// Parameters as broadcast by the server.
#[derive(Clone, Debug, PartialEq)]
pub struct StampedParams {
    pub params: ModelParams,
    pub iter: usize,
    pub step: StepLabel,
}

/// A worker's reply; a failed computation travels as an error message.
#[derive(Clone, Debug, PartialEq)]
pub struct StampedQuantity {
    pub payload: std::result::Result<LocalQuantity, String>,
    pub iter: usize,
    pub step: StepLabel,
    pub worker: usize,
}

impl StampedQuantity {
    pub fn is_poison(&self) -> bool {
        self.payload.is_err()
    }
}

/// Which staleness-compensation strategies the server applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Strategies {
    pub correction: bool,
    pub adaptive_weights: bool,
    pub moving_average: bool,
}

impl Strategies {
    pub const ALL: Strategies = Strategies {
        correction: true,
        adaptive_weights: true,
        moving_average: true,
    };
    pub const NONE: Strategies = Strategies {
        correction: false,
        adaptive_weights: false,
        moving_average: false,
    };
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AsyncConfig {
    pub agg_threshold: usize,
    /// Weight decay exponent `a`.
    pub weight_exponent: f64,
    /// Uniform weights once every stamp exceeds this iteration.
    pub uniform_after: usize,
    /// Moving-average decay `ω`.
    pub omega: f64,
    /// Moving-average window `M`.
    pub window: usize,
    pub step_size: StepSize,
    pub mod_threshold: Option<f64>,
    /// Aggregation waits while any worker's staleness exceeds this bound.
    pub tau_max: usize,
    pub strategies: Strategies,
}

impl AsyncConfig {
    /// Defaults for `j` workers: `a = 1`, `T_c = 3`, `ω = 0.5`, `M = 1`,
    /// `α = 0.5·threshold/J`, `τ_max = 20`.
    pub fn with_threshold(agg_threshold: usize, j: usize) -> Self {
        AsyncConfig {
            agg_threshold,
            weight_exponent: 1.0,
            uniform_after: 3,
            omega: 0.5,
            window: 1,
            step_size: StepSize::Constant(0.5 * agg_threshold as f64 / j as f64),
            mod_threshold: None,
            tau_max: 20,
            strategies: Strategies::ALL,
        }
    }

    pub fn validate(&self, j: usize) -> Result<()> {
        if self.agg_threshold == 0 || self.agg_threshold > j {
            return Err(Error::Config(format!(
                "agg_threshold must lie in [1, {j}], got {}",
                self.agg_threshold
            )));
        }
        if !(self.weight_exponent > 0.0) {
            return Err(Error::Config("weight exponent must be positive".into()));
        }
        if !(self.omega > 0.0 && self.omega < 1.0) {
            return Err(Error::Config(format!("omega must lie in (0, 1), got {}", self.omega)));
        }
        if let Some(l) = self.mod_threshold {
            if !(l > 0.0) {
                return Err(Error::Config("mod threshold must be positive".into()));
            }
        }
        self.step_size.validate()
    }

    /// Broadcast stamps kept per sub-step.
    pub fn history_len(&self) -> usize {
        4 * self.tau_max + 3
    }
}
