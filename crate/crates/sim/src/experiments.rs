//! Experiment drivers shared by the command line and the tests.

use fedgp_core::baselines::{fit_independence, kl_report, predict, rmse, IndepFitOptions};
use fedgp_core::data::{gen_dataset, load_dataset, DataConfig, Dataset};
use fedgp_core::gradcheck::{check_instance, GradCheck};
use fedgp_core::lowrank::ModelParams;
use fedgp_core::sync::{initial_params, run_sync, SyncConfig};
use fedgp_core::{Error, Result};

use crate::config::RunConfig;
use crate::output::KlRow;

/// Loads the configured dataset directory, or generates one.
pub fn dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data_dir {
        Some(dir) => load_dataset(dir),
        None => gen_dataset(&cfg.data),
    }
}

pub fn start(cfg: &RunConfig, ds: &Dataset) -> Result<ModelParams> {
    initial_params(&ds.shards, &ds.knots, cfg.data.kernel.nu)
}

/// KL divergences of both approximations for every knot count in `ms`.
/// Locations and partition depend only on the seed, so rows differ only in
/// the knot set.
pub fn kl_sweep(data: &DataConfig, ms: &[usize]) -> Result<Vec<KlRow>> {
    ms.iter()
        .map(|&m| {
            let cfg = DataConfig {
                m,
                holdout: 0,
                ..data.clone()
            };
            let ds = gen_dataset(&cfg)?;
            Ok(KlRow {
                seed: cfg.seed,
                j: cfg.j,
                n: ds.n_total(),
                m,
                report: kl_report(&ds.shards, &ds.knots, &cfg.kernel)?,
            })
        })
        .collect()
}

/// Finite-difference check of every derivative on `instances` datasets
/// drawn from `data` with consecutive seeds. Derivatives are taken after two
/// synchronous iterations so that `μ`, `Σ` and `γ` are away from their
/// generating values.
pub fn gradient_suite(data: &DataConfig, instances: usize) -> Result<GradCheck> {
    let mut out = GradCheck::default();
    for k in 0..instances {
        let cfg = DataConfig {
            seed: data.seed.wrapping_add(k as u64),
            holdout: 0,
            ..data.clone()
        };
        let ds = gen_dataset(&cfg)?;
        let init = initial_params(&ds.shards, &ds.knots, cfg.kernel.nu)?;
        let sc = SyncConfig {
            max_iters: 2,
            grad_tol: 0.0,
            ..SyncConfig::default()
        };
        let mode = fedgp_core::lowrank::ResidualMode::FullLocal;
        let run = run_sync(&ds.shards, &ds.knots, mode, &sc, &init, None)?;
        out = out.merge(check_instance(&ds.shards, &ds.knots, &run.params)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionReport {
    pub n_holdout: usize,
    pub rmse_lowrank: f64,
    pub rmse_indep: f64,
    pub lowrank: ModelParams,
    pub indep: ModelParams,
}

/// Fits both estimators and scores them on the holdout set. The
/// independence model predicts with `x₀ᵀγ` only.
pub fn eval_predict(cfg: &RunConfig, ds: &Dataset) -> Result<PredictionReport> {
    let holdout = ds
        .holdout
        .as_ref()
        .filter(|h| !h.is_empty())
        .ok_or_else(|| Error::Input("dataset has no holdout set".into()))?;
    let init = start(cfg, ds)?;
    let run = run_sync(&ds.shards, &ds.knots, cfg.mode, &cfg.sync, &init, None)?;
    if let Some(e) = run.failure {
        return Err(e);
    }
    let fit = fit_independence(&ds.shards, &init, IndepFitOptions::default())?;
    let lr = predict(&holdout.locs, &holdout.x, &run.params, &ds.knots)?;
    let ind = &holdout.x * &fit.params.gamma;
    Ok(PredictionReport {
        n_holdout: holdout.len(),
        rmse_lowrank: rmse(&lr, &holdout.z),
        rmse_indep: rmse(&ind, &holdout.z),
        lowrank: run.params,
        indep: fit.params,
    })
}
