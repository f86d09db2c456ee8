//! Randomized model checks of the worker buffer and the server counters.
//! Each operation is mirrored on a plain reference model and every
//! observable is compared after it.

use std::collections::BTreeSet;

use fedgp_core::data::{gen_dataset, DataConfig};
use fedgp_core::kernel::Smoothness;
use fedgp_core::lowrank::{PiecesCache, ResidualMode};
use fedgp_core::protocol::{worker_compute, AsyncConfig, Server, StampedParams, StampedQuantity, StepLabel, WorkerBuffer};
use fedgp_core::sync::initial_params;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Default)]
pub struct CheckReport {
    pub ops: usize,
    pub aggregations: usize,
    pub violations: Vec<String>,
}

impl CheckReport {
    fn fail(&mut self, msg: String) {
        if self.violations.len() < 20 {
            self.violations.push(msg);
        }
    }
}

pub fn check_buffer(ops: usize, seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ds = gen_dataset(&DataConfig::standard(1, 4, 2, Smoothness::Half, 0.3, seed)).expect("tiny dataset");
    let params = ds.truth.clone();
    let mut buf = WorkerBuffer::new();
    let mut model: Vec<(StepLabel, usize)> = Vec::new();
    let mut report = CheckReport::default();
    for op in 0..ops {
        report.ops += 1;
        if rng.random_bool(0.6) {
            let step = StepLabel::ALL[rng.random_range(0..3)];
            let iter = op;
            buf.push(StampedParams {
                params: params.clone(),
                iter,
                step,
            });
            if let Some(slot) = model.iter_mut().find(|(s, _)| *s == step) {
                slot.1 = iter;
            } else {
                model.push((step, iter));
            }
        } else {
            let got = buf.pop_front().map(|p| (p.step, p.iter));
            let want = if model.is_empty() { None } else { Some(model.remove(0)) };
            if got != want {
                report.fail(format!("op {op}: popped {got:?}, model {want:?}"));
            }
        }
        let seen: Vec<(StepLabel, usize)> = buf.entries().iter().map(|p| (p.step, p.iter)).collect();
        if seen != model {
            report.fail(format!("op {op}: buffer {seen:?}, model {model:?}"));
        }
        let labels: BTreeSet<StepLabel> = buf.labels().into_iter().collect();
        if buf.len() > 3 || labels.len() != buf.len() {
            report.fail(format!("op {op}: {} entries with labels {:?}", buf.len(), buf.labels()));
        }
    }
    report
}

/// Reference state mirrored beside the server.
struct Model {
    t: usize,
    step: StepLabel,
    counter: [usize; 3],
    latest: [Vec<Option<usize>>; 3],
    broadcast: [Vec<usize>; 3],
}

pub fn check_server(ops: usize, seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let j = 3;
    let mut data = DataConfig::standard(j, 10, 3, Smoothness::Half, 0.3, seed);
    data.holdout = 0;
    let ds = gen_dataset(&data).expect("tiny dataset");
    let init = initial_params(&ds.shards, &ds.knots, Smoothness::Half).expect("start");
    let threshold = rng.random_range(1..=j);
    let mut cfg = AsyncConfig::with_threshold(threshold, j);
    cfg.tau_max = 2;
    let mut server = Server::new(init, j, ds.knots.clone(), cfg).expect("valid server");
    let first = server.initial_broadcast();
    let mut model = Model {
        t: 0,
        step: StepLabel::MuSigma,
        counter: [0; 3],
        latest: std::array::from_fn(|_| vec![None; j]),
        broadcast: std::array::from_fn(|_| Vec::new()),
    };
    model.broadcast[first.step.index()].push(first.iter);
    let mut caches: Vec<PiecesCache> = (0..j).map(|_| PiecesCache::new()).collect();
    let mut report = CheckReport::default();

    for op in 0..ops {
        report.ops += 1;
        if rng.random_bool(0.55) {
            let step = StepLabel::ALL[rng.random_range(0..3)];
            let stamps = &model.broadcast[step.index()];
            if stamps.is_empty() {
                continue;
            }
            // Mostly recent stamps, sometimes older than the staleness bound.
            let back = rng.random_range(0..stamps.len().min(cfg.tau_max + 3));
            let iter = stamps[stamps.len() - 1 - back];
            let w = rng.random_range(0..j);
            let q = if rng.random_bool(0.05) {
                StampedQuantity {
                    payload: Err("injected failure".into()),
                    iter,
                    step,
                    worker: w,
                }
            } else {
                let params = server.lookup(iter, step).expect("broadcast stamp retained").clone();
                let p = StampedParams { params, iter, step };
                worker_compute(&ds.shards[w], &ds.knots, &p, ResidualMode::FullLocal, &mut caches[w])
            };
            let poison = q.is_poison();
            if let Err(e) = server.on_receive(q) {
                report.fail(format!("op {op}: receive failed: {e}"));
            }
            model.counter[step.index()] += 1;
            if !poison {
                model.latest[step.index()][w] = Some(iter);
            }
        } else {
            let s = model.step.index();
            let stale: Option<Vec<usize>> = model.latest[s].iter().map(|o| o.map(|i| model.t - i)).collect();
            let expect = model.counter[s] >= threshold
                && stale.as_ref().is_some_and(|v| v.iter().all(|&x| x <= cfg.tau_max));
            match server.try_step() {
                Err(e) => report.fail(format!("op {op}: try_step failed: {e}")),
                Ok(None) if expect => report.fail(format!("op {op}: expected an aggregation")),
                Ok(Some(_)) if !expect => report.fail(format!("op {op}: unexpected aggregation")),
                Ok(None) => {}
                Ok(Some((b, rec))) => {
                    report.aggregations += 1;
                    if Some(&rec.staleness) != stale.as_ref() || rec.iter != model.t {
                        report.fail(format!("op {op}: record {:?} at {}", rec.staleness, rec.iter));
                    }
                    if (rec.weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                        report.fail(format!("op {op}: weights {:?}", rec.weights));
                    }
                    model.counter[s] = 0;
                    if model.step == StepLabel::DeltaTheta {
                        model.t += 1;
                    }
                    model.step = model.step.next();
                    if (b.iter, b.step) != (model.t, model.step) {
                        report.fail(format!("op {op}: broadcast ({}, {})", b.iter, b.step));
                    }
                    model.broadcast[b.step.index()].push(b.iter);
                }
            }
        }
        for step in StepLabel::ALL {
            let i = step.index();
            if server.counter(step) != model.counter[i] {
                report.fail(format!("op {op}: {step} counter {} vs {}", server.counter(step), model.counter[i]));
            }
            for w in 0..j {
                if server.latest(step, w).map(|q| q.iter) != model.latest[i][w] {
                    report.fail(format!("op {op}: latest ({step}, {w}) differs"));
                }
            }
        }
        if server.iter() != model.t || server.pending_step() != model.step {
            report.fail(format!("op {op}: server at ({}, {})", server.iter(), server.pending_step()));
        }
    }
    report
}
