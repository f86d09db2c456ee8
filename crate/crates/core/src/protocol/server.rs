use std::collections::VecDeque;

use nalgebra::Vector3;

use super::{adaptive_weights, AsyncConfig, StampedParams, StampedQuantity, StepLabel};
use crate::error::{Error, Result};
use crate::linalg::{frobenius_dot, symmetrize};
use crate::lowrank::{KnotSet, ModelParams, ThetaTilde};
use crate::sync::{apply_update, weighted_sum, LocalQuantity};

/// Summary of one aggregation, for traces.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregationRecord {
    /// Server iteration at which the aggregation happened.
    pub iter: usize,
    pub step: StepLabel,
    pub weights: Vec<f64>,
    pub staleness: Vec<usize>,
    /// Full `θ̃` gradient norm, for `δθ` aggregations.
    pub grad_norm: Option<f64>,
}

/// Taylor-corrects a worker's `θ̃` gradient from the parameters it used to
/// the reference parameters. The `γ` displacement is not corrected.
pub fn corrected_gradient(
    q: &LocalQuantity,
    params_j: &ModelParams,
    params_rec: &ModelParams,
) -> Result<Vector3<f64>> {
    let LocalQuantity::DeltaTheta { grad, hess, cross } = q else {
        return Err(Error::Protocol("gradient correction needs a delta-theta quantity".into()));
    };
    let d_theta = params_rec.theta_tilde().to_vector() - params_j.theta_tilde().to_vector();
    let d_mu = &params_rec.mu - &params_j.mu;
    let d_sigma = &params_rec.sigma - &params_j.sigma;
    let mut g = grad + hess * d_theta + &cross.mu * d_mu;
    for a in 0..3 {
        g[a] += frobenius_dot(&cross.sigma[a], &d_sigma);
    }
    Ok(g)
}

/// Exponentially weighted mean `Σ_i ωⁱ φ_{t−i} / Σ_i ωⁱ` of a history given
/// newest first.
pub fn moving_average(history: &[ModelParams], omega: f64) -> Result<ModelParams> {
    let newest = history
        .first()
        .ok_or_else(|| Error::Protocol("moving average of an empty history".into()))?;
    let mut out = newest.clone();
    if history.len() == 1 {
        return Ok(out);
    }
    let raw: Vec<f64> = (0..history.len()).map(|i| omega.powi(i as i32)).collect();
    let z: f64 = raw.iter().sum();
    out.mu.fill(0.0);
    out.sigma.fill(0.0);
    out.gamma.fill(0.0);
    let mut theta = Vector3::zeros();
    for (w, p) in raw.iter().zip(history) {
        let w = w / z;
        out.mu += &p.mu * w;
        out.sigma += &p.sigma * w;
        out.gamma += &p.gamma * w;
        theta += p.theta_tilde().to_vector() * w;
    }
    symmetrize(&mut out.sigma);
    out.set_theta_tilde(ThetaTilde::projected(theta))?;
    Ok(out)
}

/// Copies the block updated by `step` from `src` into `dst`.
fn copy_block(step: StepLabel, src: &ModelParams, dst: &mut ModelParams) -> Result<()> {
    match step {
        StepLabel::MuSigma => {
            dst.mu.copy_from(&src.mu);
            dst.sigma.copy_from(&src.sigma);
        }
        StepLabel::Gamma => dst.gamma.copy_from(&src.gamma),
        StepLabel::DeltaTheta => dst.set_theta_tilde(src.theta_tilde())?,
    }
    Ok(())
}

/// Server-side state: latest quantities, counters, broadcast history.
#[derive(Clone, Debug)]
pub struct Server {
    j: usize,
    knots: KnotSet,
    cfg: AsyncConfig,
    params: ModelParams,
    t: usize,
    step: StepLabel,
    latest: [Vec<Option<StampedQuantity>>; 3],
    counter: [usize; 3],
    history: [VecDeque<(usize, ModelParams)>; 3],
    smoothing: [VecDeque<ModelParams>; 3],
    last_grad_norm: f64,
    poison_count: usize,
}

impl Server {
    pub fn new(init: ModelParams, j: usize, knots: KnotSet, cfg: AsyncConfig) -> Result<Self> {
        cfg.validate(j)?;
        init.validate()?;
        Ok(Server {
            j,
            knots,
            cfg,
            params: init,
            t: 0,
            step: StepLabel::MuSigma,
            latest: std::array::from_fn(|_| vec![None; j]),
            counter: [0; 3],
            history: std::array::from_fn(|_| VecDeque::new()),
            smoothing: std::array::from_fn(|_| VecDeque::new()),
            last_grad_norm: 0.0,
            poison_count: 0,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn iter(&self) -> usize {
        self.t
    }

    /// The sub-step the server is waiting to aggregate next.
    pub fn pending_step(&self) -> StepLabel {
        self.step
    }

    pub fn counter(&self, step: StepLabel) -> usize {
        self.counter[step.index()]
    }

    pub fn latest(&self, step: StepLabel, worker: usize) -> Option<&StampedQuantity> {
        self.latest[step.index()].get(worker)?.as_ref()
    }

    pub fn poison_count(&self) -> usize {
        self.poison_count
    }

    pub fn config(&self) -> &AsyncConfig {
        &self.cfg
    }

    fn remember(&mut self, p: &StampedParams) {
        let h = &mut self.history[p.step.index()];
        h.push_back((p.iter, p.params.clone()));
        while h.len() > self.cfg.history_len() {
            h.pop_front();
        }
    }

    /// The first broadcast `(φ⁰, 0, MuSigma)`.
    pub fn initial_broadcast(&mut self) -> StampedParams {
        let p = StampedParams {
            params: self.params.clone(),
            iter: self.t,
            step: self.step,
        };
        self.remember(&p);
        p
    }

    /// Parameters broadcast with stamp `(iter, step)`.
    pub fn lookup(&self, iter: usize, step: StepLabel) -> Result<&ModelParams> {
        self.history[step.index()]
            .iter()
            .find(|(t, _)| *t == iter)
            .map(|(_, p)| p)
            .ok_or_else(|| Error::Protocol(format!("broadcast ({iter}, {step}) is no longer in the history")))
    }

    /// Stores `q` as the latest from its worker for its step and counts it.
    /// Poison messages are logged and counted but not stored.
    pub fn on_receive(&mut self, q: StampedQuantity) -> Result<()> {
        if q.worker >= self.j {
            return Err(Error::Protocol(format!("quantity from unknown worker {}", q.worker)));
        }
        let s = q.step.index();
        self.counter[s] += 1;
        match &q.payload {
            Err(msg) => {
                self.poison_count += 1;
                log::warn!("worker {} sent a failure for ({}, {}): {msg}", q.worker, q.iter, q.step);
            }
            Ok(payload) => {
                if payload.step() != q.step {
                    return Err(Error::Protocol(format!(
                        "worker {} sent a {} payload labelled {}",
                        q.worker,
                        payload.step(),
                        q.step
                    )));
                }
                let w = q.worker;
                self.latest[s][w] = Some(q);
            }
        }
        Ok(())
    }

    /// Staleness of every worker's latest quantity for the pending step, if
    /// all workers have reported.
    pub fn staleness(&self) -> Option<Vec<usize>> {
        self.latest[self.step.index()]
            .iter()
            .map(|q| q.as_ref().map(|q| self.t.saturating_sub(q.iter)))
            .collect()
    }

    /// True when enough quantities arrived but some worker is too stale.
    pub fn blocked_by_staleness(&self) -> bool {
        self.counter[self.step.index()] >= self.cfg.agg_threshold
            && self
                .staleness()
                .is_some_and(|tau| tau.iter().any(|&x| x > self.cfg.tau_max))
    }

    /// Aggregates the pending step when the threshold is met, every worker
    /// has reported and no staleness exceeds `τ_max`. Returns the new
    /// broadcast and a record of the aggregation.
    pub fn try_step(&mut self) -> Result<Option<(StampedParams, AggregationRecord)>> {
        let step = self.step;
        let s = step.index();
        if self.counter[s] < self.cfg.agg_threshold {
            return Ok(None);
        }
        let Some(staleness) = self.staleness() else {
            return Ok(None);
        };
        if staleness.iter().any(|&x| x > self.cfg.tau_max) {
            return Ok(None);
        }
        let quantities: Vec<&StampedQuantity> = self.latest[s].iter().map(|q| q.as_ref().expect("checked")).collect();
        let stamps: Vec<usize> = quantities.iter().map(|q| q.iter).collect();
        let strategies = self.cfg.strategies;
        let weights = if strategies.adaptive_weights {
            adaptive_weights(
                &staleness,
                self.t,
                self.last_grad_norm,
                self.cfg.weight_exponent,
                self.cfg.uniform_after,
                &stamps,
            )
        } else {
            vec![1.0 / self.j as f64; self.j]
        };

        let mut corrected: Vec<LocalQuantity> = Vec::new();
        if step == StepLabel::DeltaTheta && strategies.correction {
            let t_rec = *stamps.iter().max().expect("at least one worker");
            let rec = self.lookup(t_rec, step)?;
            for q in &quantities {
                let payload = q.payload.as_ref().expect("poison is never stored");
                if q.iter == t_rec {
                    corrected.push(payload.clone());
                    continue;
                }
                let own = self.lookup(q.iter, step)?;
                let g = corrected_gradient(payload, own, rec)?;
                let mut c = payload.clone();
                if let LocalQuantity::DeltaTheta { grad, .. } = &mut c {
                    *grad = g;
                }
                corrected.push(c);
            }
        } else {
            corrected = quantities
                .iter()
                .map(|q| q.payload.clone().expect("poison is never stored"))
                .collect();
        }
        let items: Vec<(f64, &LocalQuantity)> = weights.iter().copied().zip(corrected.iter()).collect();
        let agg = weighted_sum(&items)?;
        if let LocalQuantity::DeltaTheta { grad, .. } = &agg {
            self.last_grad_norm = grad.norm();
        }

        let alpha = self.cfg.step_size.at(self.t);
        let (mut next, grad_norm) =
            apply_update(step, &self.params, &agg, self.j, &self.knots, alpha, self.cfg.mod_threshold)?;
        if strategies.moving_average && self.cfg.window > 0 {
            let ring = &mut self.smoothing[s];
            ring.push_front(next.clone());
            ring.truncate(self.cfg.window + 1);
            let averaged = moving_average(ring.make_contiguous(), self.cfg.omega)?;
            copy_block(step, &averaged, &mut next)?;
            ring[0] = next.clone();
        }

        let record = AggregationRecord {
            iter: self.t,
            step,
            weights,
            staleness,
            grad_norm,
        };
        self.params = next;
        self.counter[s] = 0;
        if step == StepLabel::DeltaTheta {
            self.t += 1;
        }
        self.step = step.next();
        let broadcast = StampedParams {
            params: self.params.clone(),
            iter: self.t,
            step: self.step,
        };
        self.remember(&broadcast);
        Ok(Some((broadcast, record)))
    }
}
