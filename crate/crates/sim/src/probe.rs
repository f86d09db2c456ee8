//! Suboptimality sequence `V_t = f_t − f̂` and its log-linear rate.

use fedgp_core::lowrank::{KnotSet, ModelParams, ResidualMode, WorkerShard};
use fedgp_core::sync::{run_sync, StepSize, SyncConfig};
use fedgp_core::{Error, Result};

use crate::simulate::EventTrace;

/// Iteration cap of the reference run used for `f̂`.
pub const REFERENCE_ITERS: usize = 500;

/// Minimum objective over a long synchronous run with unit step size.
/// The run stops early once the gradient norm falls below `1e-10`, after
/// which `f` no longer moves at double precision.
pub fn reference_minimum(
    shards: &[WorkerShard],
    knots: &KnotSet,
    mode: ResidualMode,
    init: &ModelParams,
    max_iters: usize,
) -> Result<f64> {
    let cfg = SyncConfig {
        max_iters,
        step_size: StepSize::Constant(1.0),
        grad_tol: 1e-10,
        ..SyncConfig::default()
    };
    let run = run_sync(shards, knots, mode, &cfg, init, None)?;
    if let Some(e) = run.failure {
        return Err(e);
    }
    run.trace
        .iter()
        .map(|r| r.f)
        .filter(|f| f.is_finite())
        .min_by(f64::total_cmp)
        .ok_or_else(|| Error::numerical("reference run", "no finite objective values"))
}

/// Least-squares line through `(x, y)`: `(slope, intercept, r²)`.
pub fn fit_line(points: &[(f64, f64)]) -> Option<(f64, f64, f64)> {
    let n = points.len() as f64;
    if points.len() < 3 {
        return None;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some((slope, my - slope * mx, r2))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub f_hat: f64,
    /// `V` at the initial parameters.
    pub v0: f64,
    /// `(iteration, V_t)` at the end of each full iteration.
    pub v: Vec<(usize, f64)>,
    /// First and last iteration used in the fit.
    pub window: (usize, usize),
    pub slope: f64,
    pub r2: f64,
    pub tau_max: usize,
    pub tau_mean: f64,
    pub alpha: f64,
    /// Whether `f̂` had to be lowered to the pooled minimum of the trace.
    pub f_hat_lowered: bool,
}

impl ProbeReport {
    pub fn v_final(&self) -> f64 {
        self.v.last().map_or(self.v0, |p| p.1)
    }

    /// Linear-rate evidence: negative slope with `r² ≥ min_r2`.
    pub fn linear(&self, min_r2: f64) -> bool {
        self.slope < 0.0 && self.r2 >= min_r2
    }
}

/// Builds the probe for `trace`. The fit uses iterations `first..=last`,
/// truncated where `V_t/V_0` drops below `floor` (the precision limit of
/// `f`).
pub fn theory_probe(
    trace: &EventTrace,
    f_hat: f64,
    alpha: f64,
    first: usize,
    last: usize,
    floor: f64,
) -> Result<ProbeReport> {
    let pooled = trace
        .rows
        .iter()
        .map(|r| r.f)
        .chain(std::iter::once(trace.initial_f))
        .filter(|f| f.is_finite())
        .fold(f64::INFINITY, f64::min);
    let tol = 1e-8 * f_hat.abs().max(1.0);
    let f_hat_lowered = pooled < f_hat - tol;
    let f_hat = if f_hat_lowered { pooled } else { f_hat };
    let v0 = trace.initial_f - f_hat;
    if !(v0 > 0.0) {
        return Err(Error::Input("initial objective is already at the reference minimum".into()));
    }
    let v: Vec<(usize, f64)> = trace.iteration_rows().map(|r| (r.iter, r.f - f_hat)).collect();
    let mut points = Vec::new();
    let mut end = first;
    for &(t, vt) in &v {
        if t < first || t > last {
            continue;
        }
        if !(vt > floor * v0) {
            break;
        }
        points.push((t as f64, vt.ln()));
        end = t;
    }
    let (slope, _, r2) = fit_line(&points).unwrap_or((f64::NAN, f64::NAN, f64::NAN));
    let (tau_max, tau_mean) = trace
        .rows
        .last()
        .map_or((0, 0.0), |r| (r.tau_max_so_far, r.tau_mean_so_far));
    Ok(ProbeReport {
        f_hat,
        v0,
        v,
        window: (first, end),
        slope,
        r2,
        tau_max,
        tau_mean,
        alpha,
        f_hat_lowered,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_fit_recovers_exact_line() {
        let pts: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, 3.0 - 0.5 * i as f64)).collect();
        let (s, b, r2) = fit_line(&pts).unwrap();
        assert!((s + 0.5).abs() < 1e-12 && (b - 3.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn line_fit_needs_three_distinct_points() {
        assert!(fit_line(&[(0.0, 1.0), (1.0, 2.0)]).is_none());
        assert!(fit_line(&[(1.0, 1.0), (1.0, 2.0), (1.0, 3.0)]).is_none());
    }
}
