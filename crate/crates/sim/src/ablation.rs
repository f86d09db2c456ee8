//! Strategy ablation: the same dataset and start under five strategy sets.

use fedgp_core::lowrank::{KnotSet, ModelParams, ResidualMode, WorkerShard};
use fedgp_core::protocol::{AsyncConfig, Strategies};
use fedgp_core::Result;

use crate::compute::ComputeModel;
use crate::simulate::{run_simulation, EventTrace, Protocol, SimOptions};

/// `(name, strategies)` for every variant, in output order.
pub const VARIANTS: [(&str, Strategies); 5] = [
    ("none", Strategies::NONE),
    (
        "correction",
        Strategies {
            correction: true,
            ..Strategies::NONE
        },
    ),
    (
        "weights",
        Strategies {
            adaptive_weights: true,
            ..Strategies::NONE
        },
    ),
    (
        "moving-average",
        Strategies {
            moving_average: true,
            ..Strategies::NONE
        },
    ),
    ("all", Strategies::ALL),
];

#[derive(Clone, Debug)]
pub struct Variant {
    pub name: &'static str,
    pub strategies: Strategies,
    pub trace: EventTrace,
}

/// Runs every variant of `base`. Divergence ends a variant's run and is
/// recorded in its trace.
pub fn ablate_strategies(
    shards: &[WorkerShard],
    knots: &KnotSet,
    mode: ResidualMode,
    base: &AsyncConfig,
    model: &ComputeModel,
    opts: &SimOptions,
    init: &ModelParams,
) -> Result<Vec<Variant>> {
    VARIANTS
        .iter()
        .map(|&(name, strategies)| {
            let cfg = AsyncConfig { strategies, ..*base };
            let trace = run_simulation(shards, knots, mode, &Protocol::Async(cfg), model, opts, init)?;
            Ok(Variant {
                name,
                strategies,
                trace,
            })
        })
        .collect()
}
