//! Discrete-event execution of the sync and async protocols in virtual time.

use fedgp_core::lowrank::{eval_objective, KnotSet, ModelParams, ResidualMode, ThetaTilde, WorkerShard};
use fedgp_core::protocol::{
    AggregationRecord, AsyncConfig, Server, StampedParams, StampedQuantity, StepLabel, Strategies, Worker,
};
use fedgp_core::sync::SyncConfig;
use fedgp_core::{Error, Result};

use crate::clock::VirtualClock;
use crate::compute::{ComputeModel, Network};

#[derive(Clone, Debug, PartialEq)]
pub enum Protocol {
    /// Stops early once the gradient norm reaches `grad_tol`, like `run_sync`.
    Sync(SyncConfig),
    Async(AsyncConfig),
}

impl Protocol {
    /// Server configuration realizing this protocol. Synchronous execution
    /// is the threshold-`J` server with no compensation strategies.
    pub fn server_config(&self, j: usize) -> AsyncConfig {
        match self {
            Protocol::Async(c) => *c,
            Protocol::Sync(s) => AsyncConfig {
                agg_threshold: j,
                weight_exponent: 1.0,
                uniform_after: 0,
                omega: 0.5,
                window: 0,
                step_size: s.step_size,
                mod_threshold: s.mod_threshold,
                tau_max: 0,
                strategies: Strategies::NONE,
            },
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Protocol::Sync(_) => "sync",
            Protocol::Async(_) => "async",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimOptions {
    /// Stop once the server completes this many full iterations.
    pub max_iters: usize,
    /// Stop once virtual time passes this many seconds.
    pub max_time: f64,
    pub seed: u64,
    /// Evaluate the full objective after every aggregation.
    pub record_objective: bool,
    /// Keep a full parameter snapshot in every row.
    pub keep_params: bool,
    /// Keep a log of every message.
    pub log_messages: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            max_iters: 50,
            max_time: f64::INFINITY,
            seed: 0,
            record_objective: true,
            keep_params: false,
            log_messages: false,
        }
    }
}

/// State after one aggregation.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub virtual_time: f64,
    pub iter: usize,
    pub step: StepLabel,
    pub f: f64,
    pub grad_norm: f64,
    pub theta: ThetaTilde,
    pub gamma: Vec<f64>,
    pub params: Option<ModelParams>,
    pub staleness: Vec<usize>,
    pub weights: Vec<f64>,
    pub tau_max_so_far: usize,
    pub tau_mean_so_far: f64,
}

impl TraceRow {
    pub fn gamma_avg(&self) -> f64 {
        self.gamma.iter().sum::<f64>() / self.gamma.len().max(1) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    ToWorker,
    ToServer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MessageRecord {
    pub direction: Direction,
    pub worker: usize,
    pub iter: usize,
    pub step: StepLabel,
    pub sent: f64,
    pub latency: f64,
    /// Time the receiver consumed the message.
    pub delivered: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventTrace {
    pub protocol: &'static str,
    /// Objective at the initial parameters.
    pub initial_f: f64,
    pub rows: Vec<TraceRow>,
    pub messages: Vec<MessageRecord>,
    pub final_params: ModelParams,
    /// Numerical failure that ended the run early, if any.
    pub failure: Option<String>,
    pub tau_max_configured: usize,
}

impl EventTrace {
    /// Rows closing a full iteration (after the `δθ` update).
    pub fn iteration_rows(&self) -> impl Iterator<Item = &TraceRow> {
        self.rows.iter().filter(|r| r.step == StepLabel::DeltaTheta)
    }

    pub fn diverged(&self) -> bool {
        self.failure.is_some() || self.rows.iter().any(|r| !r.f.is_finite())
    }

    /// Virtual time and aggregation count of the first row with `f ≤ target`.
    pub fn first_reaching(&self, target: f64) -> Option<(f64, usize)> {
        self.rows
            .iter()
            .enumerate()
            .find(|(_, r)| r.f <= target)
            .map(|(i, r)| (r.virtual_time, i + 1))
    }
}

enum Event {
    ParamsArrive { worker: usize, params: StampedParams, msg: Option<usize> },
    WorkerDone { worker: usize, quantity: StampedQuantity },
    QuantityArrive { quantity: StampedQuantity, msg: Option<usize> },
}

struct Run<'a> {
    shards: &'a [WorkerShard],
    knots: &'a KnotSet,
    mode: ResidualMode,
    model: &'a ComputeModel,
    opts: SimOptions,
    clock: VirtualClock<Event>,
    net: Network,
    workers: Vec<Worker>,
    busy: Vec<bool>,
    messages: Vec<MessageRecord>,
}

impl Run<'_> {
    fn log(&mut self, direction: Direction, worker: usize, iter: usize, step: StepLabel, latency: f64) -> Option<usize> {
        if !self.opts.log_messages {
            return None;
        }
        self.messages.push(MessageRecord {
            direction,
            worker,
            iter,
            step,
            sent: self.clock.now(),
            latency,
            delivered: f64::NAN,
        });
        Some(self.messages.len() - 1)
    }

    fn deliver(&mut self, msg: Option<usize>) {
        if let Some(i) = msg {
            self.messages[i].delivered = self.clock.now();
        }
    }

    fn broadcast(&mut self, p: &StampedParams) {
        for j in 0..self.workers.len() {
            let d = self.net.delay();
            let msg = self.log(Direction::ToWorker, j, p.iter, p.step, d);
            self.clock.schedule(
                d,
                Event::ParamsArrive {
                    worker: j,
                    params: p.clone(),
                    msg,
                },
            );
        }
    }

    fn start_next(&mut self, j: usize) {
        if self.busy[j] {
            return;
        }
        let Some(p) = self.workers[j].next_job() else {
            return;
        };
        let q = self.workers[j].compute(&p, self.knots, self.mode);
        let cost = self
            .model
            .compute_time(j, p.step, self.shards[j].len(), self.knots.len(), self.mode);
        self.busy[j] = true;
        self.clock.schedule(cost, Event::WorkerDone { worker: j, quantity: q });
    }
}

/// Runs `protocol` over virtual time. Numerical failures end the run and
/// are reported in the trace; protocol violations and deadlocks are errors.
pub fn run_simulation(
    shards: &[WorkerShard],
    knots: &KnotSet,
    mode: ResidualMode,
    protocol: &Protocol,
    model: &ComputeModel,
    opts: &SimOptions,
    init: &ModelParams,
) -> Result<EventTrace> {
    let j = shards.len();
    model.validate(j)?;
    if let Protocol::Sync(s) = protocol {
        s.validate()?;
    }
    let cfg = protocol.server_config(j);
    let mut server = Server::new(init.clone(), j, knots.clone(), cfg)?;
    let initial_f = eval_objective(shards, knots, init, mode)?;
    let mut run = Run {
        shards,
        knots,
        mode,
        model,
        opts: *opts,
        clock: VirtualClock::new(),
        net: Network::new(model, opts.seed),
        workers: shards.iter().cloned().map(Worker::new).collect(),
        busy: vec![false; j],
        messages: Vec::new(),
    };
    let mut rows: Vec<TraceRow> = Vec::new();
    let mut failure = None;
    let mut grad_norm = f64::NAN;
    let (mut tau_max, mut tau_sum, mut tau_count) = (0usize, 0usize, 0usize);

    let first = server.initial_broadcast();
    run.broadcast(&first);
    let mut done = opts.max_iters == 0;
    while !done {
        let Some((now, event)) = run.clock.pop() else {
            return Err(Error::Protocol(deadlock_report(&server, &run)));
        };
        if now > opts.max_time {
            break;
        }
        match event {
            Event::ParamsArrive { worker, params, msg } => {
                run.deliver(msg);
                run.workers[worker].receive(params);
                run.start_next(worker);
            }
            Event::WorkerDone { worker, quantity } => {
                run.busy[worker] = false;
                let d = run.net.delay();
                let msg = run.log(Direction::ToServer, worker, quantity.iter, quantity.step, d);
                run.clock.schedule(d, Event::QuantityArrive { quantity, msg });
                run.start_next(worker);
            }
            Event::QuantityArrive { quantity, msg } => {
                run.deliver(msg);
                server.on_receive(quantity)?;
                loop {
                    let (broadcast, rec) = match server.try_step() {
                        Ok(Some(v)) => v,
                        Ok(None) => break,
                        Err(e) if e.is_numerical() => {
                            failure = Some(e.to_string());
                            done = true;
                            break;
                        }
                        Err(e) => return Err(e),
                    };
                    if let Some(g) = rec.grad_norm {
                        grad_norm = g;
                    }
                    for &s in &rec.staleness {
                        tau_max = tau_max.max(s);
                        tau_sum += s;
                        tau_count += 1;
                    }
                    let params = server.params();
                    let f = if opts.record_objective {
                        eval_objective(shards, knots, params, mode).unwrap_or(f64::NAN)
                    } else {
                        f64::NAN
                    };
                    rows.push(row(now, &rec, f, grad_norm, params, opts.keep_params, tau_max, tau_sum, tau_count));
                    if opts.record_objective && !f.is_finite() {
                        failure = Some(format!("objective became non-finite at iteration {}", rec.iter));
                        done = true;
                        break;
                    }
                    let tolerance_met = match protocol {
                        Protocol::Sync(s) => rec.step == StepLabel::DeltaTheta && grad_norm <= s.grad_tol,
                        Protocol::Async(_) => false,
                    };
                    if tolerance_met || server.iter() >= opts.max_iters {
                        done = true;
                        break;
                    }
                    run.broadcast(&broadcast);
                }
            }
        }
    }
    Ok(EventTrace {
        protocol: protocol.name(),
        initial_f,
        rows,
        messages: run.messages,
        final_params: server.params().clone(),
        failure,
        tau_max_configured: cfg.tau_max,
    })
}

#[allow(clippy::too_many_arguments)]
fn row(
    now: f64,
    rec: &AggregationRecord,
    f: f64,
    grad_norm: f64,
    params: &ModelParams,
    keep: bool,
    tau_max: usize,
    tau_sum: usize,
    tau_count: usize,
) -> TraceRow {
    TraceRow {
        virtual_time: now,
        iter: rec.iter,
        step: rec.step,
        f,
        grad_norm,
        theta: params.theta_tilde(),
        gamma: params.gamma.iter().copied().collect(),
        params: keep.then(|| params.clone()),
        staleness: rec.staleness.clone(),
        weights: rec.weights.clone(),
        tau_max_so_far: tau_max,
        tau_mean_so_far: if tau_count == 0 { 0.0 } else { tau_sum as f64 / tau_count as f64 },
    }
}

fn deadlock_report(server: &Server, run: &Run<'_>) -> String {
    let mut s = format!(
        "deadlock: no pending events at t={:.6}s, server at iteration {} waiting for {}",
        run.clock.now(),
        server.iter(),
        server.pending_step()
    );
    for step in StepLabel::ALL {
        s.push_str(&format!("; counter[{step}]={}", server.counter(step)));
    }
    for (j, w) in run.workers.iter().enumerate() {
        s.push_str(&format!("; worker {j} busy={} buffer={:?}", run.busy[j], w.buffer.labels()));
    }
    if let Some(tau) = server.staleness() {
        s.push_str(&format!("; staleness={tau:?}"));
    }
    s
}
