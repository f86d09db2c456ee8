//! Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails. Criteria that need the desk instance share one dataset
//! (seed 1) and one reference minimum.

#[path = "../../core/tests/support/model_check.rs"]
mod model_check;

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use fedgp_core::baselines::{fit_independence, kl_report, IndepFitOptions};
use fedgp_core::data::{gen_dataset, DataConfig, Dataset};
use fedgp_core::kernel::Smoothness;
use fedgp_core::lowrank::{dense_lowrank_loglik, eval_objective, knot_covariance, ModelParams, PiecesCache, ResidualMode};
use fedgp_core::protocol::{AsyncConfig, StepLabel};
use fedgp_core::sync::{compute_local, initial_params, run_sync, update_mu_sigma, weighted_sum, LocalQuantity, StepSize, SyncConfig};
use fedgp_sim::ablation::ablate_strategies;
use fedgp_sim::compute::ComputeModel;
use fedgp_sim::config::default_threshold;
use fedgp_sim::experiments::gradient_suite;
use fedgp_sim::probe::{reference_minimum, theory_probe, REFERENCE_ITERS};
use fedgp_sim::simulate::{run_simulation, EventTrace, Protocol, SimOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DESK_SEED: u64 = 1;
const J: usize = 5;
const MODE: ResidualMode = ResidualMode::FullLocal;
const NUS: [Smoothness; 3] = [Smoothness::Half, Smoothness::ThreeHalves, Smoothness::FiveHalves];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Objective sequence of one run: `(step, f, all quantities fresh)` after
/// each aggregation.
struct FSeq {
    label: String,
    initial: f64,
    steps: Vec<(StepLabel, f64, bool)>,
}

struct Desk {
    ds: Dataset,
    init: ModelParams,
    f_hat: f64,
    sequences: Vec<FSeq>,
}

impl Desk {
    fn simulate(&mut self, label: &str, proto: &Protocol, model: &ComputeModel, max_iters: usize) -> EventTrace {
        let opts = SimOptions {
            max_iters,
            seed: DESK_SEED,
            ..SimOptions::default()
        };
        let t = run_simulation(&self.ds.shards, &self.ds.knots, MODE, proto, model, &opts, &self.init).expect("simulation runs");
        self.record(label, &t);
        t
    }

    fn record(&mut self, label: &str, t: &EventTrace) {
        self.sequences.push(FSeq {
            label: label.to_string(),
            initial: t.initial_f,
            steps: t.rows.iter().map(|r| (r.step, r.f, r.staleness.iter().all(|&x| x == 0))).collect(),
        });
    }

    fn v0(&self) -> f64 {
        eval_objective(&self.ds.shards, &self.ds.knots, &self.init, MODE).unwrap() - self.f_hat
    }

    fn target(&self) -> f64 {
        self.f_hat + 0.01 * self.v0()
    }
}

fn desk_data(seed: u64) -> DataConfig {
    DataConfig::standard(J, 200, 50, Smoothness::Half, 0.3, seed)
}

fn sync_proto() -> Protocol {
    Protocol::Sync(SyncConfig {
        grad_tol: 0.0,
        ..SyncConfig::default()
    })
}

fn criterion_1() -> Outcome {
    // 50 instances: 17, 17 and 16 per smoothness.
    let mut worst = fedgp_core::gradcheck::GradCheck::default();
    for (i, nu) in NUS.iter().enumerate() {
        let count = if i == 2 { 16 } else { 17 };
        let mut data = DataConfig::standard(3, 25, 6, *nu, 0.2 + 0.1 * i as f64, 100 + 50 * i as u64);
        data.holdout = 0;
        worst = worst.merge(gradient_suite(&data, count).expect("gradient suite runs"));
    }
    outcome(
        worst.first_order <= 1e-5 && worst.second_order <= 1e-4,
        format!("max rel err first {:.2e} (tol 1e-5), second {:.2e} (tol 1e-4), 50 instances", worst.first_order, worst.second_order),
    )
}

fn random_config(rng: &mut ChaCha8Rng, seed: u64, min_j: usize, max_n: usize, m_range: (usize, usize)) -> DataConfig {
    let j = rng.random_range(min_j..=5);
    let n_per = rng.random_range(10..=max_n / j);
    let m = rng.random_range(m_range.0..=m_range.1.min(j * n_per));
    let nu = NUS[rng.random_range(0..3)];
    let range = rng.random_range(0.1..0.5);
    let mut cfg = DataConfig::standard(j, n_per, m, nu, range, seed);
    cfg.holdout = 0;
    cfg
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for k in 0..20 {
        let cfg = random_config(&mut rng, 200 + k, 1, 600, (5, 40));
        let ds = gen_dataset(&cfg).unwrap();
        let mut p = initial_params(&ds.shards, &ds.knots, cfg.kernel.nu).unwrap();
        let mode = ResidualMode::ALL[k as usize % 3];
        let qs: Vec<LocalQuantity> = ds
            .shards
            .iter()
            .map(|s| compute_local(StepLabel::MuSigma, s, &ds.knots, &p, mode, &mut PiecesCache::new()).unwrap())
            .collect();
        let items: Vec<(f64, &LocalQuantity)> = qs.iter().map(|q| (1.0, q)).collect();
        let LocalQuantity::MuSigma { btrb, v } = weighted_sum(&items).unwrap() else { unreachable!() };
        let (_, kf) = knot_covariance(&ds.knots, &p.kernel).unwrap();
        let (mu, sigma) = update_mu_sigma(&btrb, &v, &kf).unwrap();
        p.mu = mu;
        p.sigma = sigma;
        let f_min = eval_objective(&ds.shards, &ds.knots, &p, mode).unwrap();
        let ll = dense_lowrank_loglik(&ds.shards, &ds.knots, &p, mode).unwrap();
        worst = worst.max((f_min + ll).abs() / ll.abs());
    }
    outcome(worst <= 1e-8, format!("max rel gap |min f + loglik|/|loglik| = {worst:.2e} over 20 instances (tol 1e-8)"))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut bound_fail, mut order_fail, mut order_checked) = (0, 0, 0);
    let mut worst_margin = f64::INFINITY;
    for k in 0..100 {
        let cfg = random_config(&mut rng, 300 + k, 2, 600, (5, 50));
        let ds = gen_dataset(&cfg).unwrap();
        let r = kl_report(&ds.shards, &ds.knots, &cfg.kernel).unwrap();
        let n = ds.n_total();
        worst_margin = worst_margin.min(r.kl_indep + r.m_over_n - r.kl_lowrank);
        if !r.bound_holds(1e-10) {
            bound_fail += 1;
        }
        if cfg.m * 10 <= n {
            order_checked += 1;
            if !(r.kl_lowrank < r.kl_indep) {
                order_fail += 1;
            }
        }
    }
    outcome(
        bound_fail == 0 && order_fail == 0,
        format!(
            "bound violations {bound_fail}/100 (min margin {worst_margin:.3e}); kl_lowrank >= kl_indep in {order_fail}/{order_checked} instances with m <= N/10"
        ),
    )
}

fn criterion_4(desk: &mut Desk) -> Outcome {
    let iters = 50;
    let alpha = 0.5;
    let sc = SyncConfig {
        max_iters: iters,
        step_size: StepSize::Constant(alpha),
        grad_tol: 0.0,
        ..SyncConfig::default()
    };
    let reference = run_sync(&desk.ds.shards, &desk.ds.knots, MODE, &sc, &desk.init, None).unwrap();
    let mut ac = AsyncConfig::with_threshold(J, J);
    ac.window = 0;
    ac.step_size = StepSize::Constant(alpha);
    let opts = SimOptions {
        max_iters: iters,
        keep_params: true,
        ..SimOptions::default()
    };
    let t = run_simulation(
        &desk.ds.shards,
        &desk.ds.knots,
        MODE,
        &Protocol::Async(ac),
        &ComputeModel::instantaneous(J),
        &opts,
        &desk.init,
    )
    .unwrap();
    desk.record("equivalence async", &t);
    desk.sequences.push(FSeq {
        label: "equivalence run_sync".into(),
        initial: t.initial_f,
        steps: reference.trace.iter().map(|r| (r.substep, r.f, true)).collect(),
    });
    let mut gap: f64 = 0.0;
    let same_len = t.rows.len() == reference.trace.len();
    for (row, rec) in t.rows.iter().zip(&reference.trace) {
        let a = row.params.as_ref().unwrap().to_flat();
        for (x, y) in a.iter().zip(rec.params.to_flat()) {
            gap = gap.max((x - y).abs());
        }
    }
    outcome(
        same_len && gap <= 1e-12 && t.failure.is_none(),
        format!("{} aggregations vs {}, max componentwise gap {gap:.2e} (tol 1e-12)", t.rows.len(), reference.trace.len()),
    )
}

fn criterion_5(desk: &Desk, extra: &[FSeq]) -> Outcome {
    let mut violations = Vec::new();
    let (mut checked, mut fresh_violations) = (0, 0);
    let mut runs_hit = std::collections::BTreeSet::new();
    for s in desk.sequences.iter().chain(extra) {
        let mut prev = s.initial;
        for (i, &(step, f, fresh)) in s.steps.iter().enumerate() {
            if step != StepLabel::DeltaTheta {
                checked += 1;
                if f > prev + 1e-10 * prev.abs() {
                    fresh_violations += usize::from(fresh);
                    runs_hit.insert(s.label.as_str());
                    violations.push(format!("{} #{i} {step} +{:.1e}", s.label, (f - prev) / prev.abs()));
                }
            }
            prev = f;
        }
    }
    let shown: Vec<&String> = violations.iter().take(2).collect();
    outcome(
        violations.is_empty(),
        format!(
            "{} increases over {checked} block sub-steps in {} runs, {fresh_violations} of them with all quantities fresh; runs affected {runs_hit:?}; e.g. {shown:?}",
            violations.len(),
            desk.sequences.len() + extra.len()
        ),
    )
}

fn criterion_6(desk: &mut Desk) -> Outcome {
    let model = ComputeModel::uniform(J);
    let f_hat = desk.f_hat;
    let sync = desk.simulate("probe sync", &sync_proto(), &model, 60);
    let ps = theory_probe(&sync, f_hat, 1.0, 5, 40, 1e-10).unwrap();
    let ac = AsyncConfig::with_threshold(default_threshold(J), J);
    let asy = desk.simulate("probe async", &Protocol::Async(ac), &model, 80);
    let pa = theory_probe(&asy, f_hat, ac.step_size.at(0), 5, 40, 1e-10).unwrap();
    let mut slow = ac;
    slow.tau_max *= 2;
    slow.step_size = StepSize::Constant(ac.step_size.at(0) / 2.0);
    let asy2 = desk.simulate("probe async tau x2", &Protocol::Async(slow), &model, 500);
    let p2 = theory_probe(&asy2, f_hat, slow.step_size.at(0), 5, 40, 1e-10).unwrap();
    let ratio = p2.v_final() / p2.v0;
    outcome(
        ps.linear(0.9) && pa.linear(0.9) && ratio <= 1e-4 && asy2.failure.is_none(),
        format!(
            "sync slope {:.3} r2 {:.3} (iters {}..={}); async slope {:.3} r2 {:.3} (iters {}..={}, tau_max {}); tau_max {} alpha {}: V_final/V0 {:.2e} (tol 1e-4)",
            ps.slope, ps.r2, ps.window.0, ps.window.1, pa.slope, pa.r2, pa.window.0, pa.window.1, pa.tau_max, slow.tau_max, p2.alpha, ratio
        ),
    )
}

fn fmt_time(t: Option<(f64, usize)>) -> String {
    t.map_or("not reached".into(), |(s, _)| format!("{s:.3}s"))
}

fn criterion_7(desk: &mut Desk) -> Outcome {
    let target = desk.target();
    let ac = Protocol::Async(AsyncConfig::with_threshold(default_threshold(J), J));
    let skewed = ComputeModel::uniform(J).with_straggler(0, 8.0);
    let even = ComputeModel::uniform(J);
    let s_skew = desk.simulate("straggler sync", &sync_proto(), &skewed, 60).first_reaching(target);
    let a_skew = desk.simulate("straggler async", &ac, &skewed, 150).first_reaching(target);
    let s_even = desk.simulate("equal sync", &sync_proto(), &even, 60).first_reaching(target);
    let a_even = desk.simulate("equal async", &ac, &even, 150).first_reaching(target);
    let faster = matches!((a_skew, s_skew), (Some(a), Some(s)) if a.0 < s.0);
    let close = matches!((a_even, s_even), (Some(a), Some(s)) if a.0 <= 1.5 * s.0);
    outcome(
        faster && close,
        format!(
            "8x straggler: async {} vs sync {}; equal speeds: async {} vs sync {} (limit 1.5x)",
            fmt_time(a_skew),
            fmt_time(s_skew),
            fmt_time(a_even),
            fmt_time(s_even)
        ),
    )
}

fn criterion_8(desk: &mut Desk) -> Outcome {
    let target = desk.target();
    let base = AsyncConfig::with_threshold(default_threshold(J), J);
    let skewed = ComputeModel::uniform(J).with_straggler(0, 8.0);
    let opts = SimOptions {
        max_iters: 150,
        seed: DESK_SEED,
        ..SimOptions::default()
    };
    let variants = ablate_strategies(&desk.ds.shards, &desk.ds.knots, MODE, &base, &skewed, &opts, &desk.init).unwrap();
    let mut summary = Vec::new();
    for v in &variants {
        desk.record(&format!("ablation {}", v.name), &v.trace);
        let reach = v.trace.first_reaching(target);
        summary.push(format!(
            "{} {}",
            v.name,
            match (reach, v.trace.diverged()) {
                (_, true) => "diverged".to_string(),
                (Some((_, k)), false) => k.to_string(),
                (None, false) => "not reached".to_string(),
            }
        ));
    }
    let reach = |name: &str| {
        let v = variants.iter().find(|v| v.name == name).expect("variant present");
        (v.trace.first_reaching(target).map(|r| r.1), v.trace.diverged())
    };
    let (all, _) = reach("all");
    let (none, none_diverged) = reach("none");
    let pass = match (all, none) {
        (Some(a), Some(n)) => a < n && (none_diverged || n as f64 >= 1.5 * a as f64),
        (Some(_), None) => true,
        _ => false,
    };
    outcome(pass, format!("aggregations to V <= 0.01 V0: {}", summary.join(", ")))
}

fn quantiles(mut v: Vec<f64>) -> (f64, f64, f64) {
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let x = p * (v.len() - 1) as f64;
        let (lo, hi) = (x.floor() as usize, x.ceil() as usize);
        v[lo] + (v[hi] - v[lo]) * (x - lo as f64)
    };
    (q(0.25), q(0.5), q(0.75))
}

fn criterion_9(extra: &mut Vec<FSeq>) -> Outcome {
    let truth_gamma = [-1.0, 2.0, 1.0, 1.0, 1.0];
    let mut gamma_err: Vec<Vec<f64>> = vec![Vec::new(); 5];
    let mut theta_lr: Vec<[f64; 3]> = Vec::new();
    let mut beta_ind = Vec::new();
    let mut truth_theta = [0.0; 3];
    let (mut failures, mut converged, mut ind_converged) = (0, 0, 0);
    for seed in 0..20 {
        let mut cfg = desk_data(1000 + seed);
        cfg.holdout = 0;
        let ds = gen_dataset(&cfg).unwrap();
        truth_theta = ds.truth.theta_tilde().0;
        let init = initial_params(&ds.shards, &ds.knots, Smoothness::Half).unwrap();
        let sc = SyncConfig {
            max_iters: 300,
            ..SyncConfig::default()
        };
        let run = run_sync(&ds.shards, &ds.knots, MODE, &sc, &init, None).unwrap();
        if run.failure.is_some() {
            failures += 1;
            continue;
        }
        converged += usize::from(run.converged);
        extra.push(FSeq {
            label: format!("recovery seed {}", 1000 + seed),
            initial: eval_objective(&ds.shards, &ds.knots, &init, MODE).unwrap(),
            steps: run.trace.iter().map(|r| (r.substep, r.f, true)).collect(),
        });
        for (k, g) in run.params.gamma.iter().enumerate() {
            gamma_err[k].push((g - truth_gamma[k]).abs());
        }
        theta_lr.push(run.params.theta_tilde().0);
        let ind = fit_independence(&ds.shards, &init, IndepFitOptions::default()).unwrap();
        ind_converged += usize::from(ind.converged);
        beta_ind.push(ind.params.theta_tilde().beta());
    }
    let gamma_med: Vec<f64> = gamma_err.into_iter().map(|e| quantiles(e).1).collect();
    let names = ["delta", "sigma2", "beta"];
    let mut theta_ok = true;
    let mut theta_txt = Vec::new();
    for a in 0..3 {
        let (_, med, _) = quantiles(theta_lr.iter().map(|t| t[a]).collect());
        let rel = (med - truth_theta[a]).abs() / truth_theta[a];
        theta_ok &= rel <= 0.5;
        theta_txt.push(format!("{} median {med:.4} (truth {:.4}, {:.0}%)", names[a], truth_theta[a], 100.0 * rel));
    }
    let (q1, _, q3) = quantiles(theta_lr.iter().map(|t| t[2]).collect());
    let (i1, _, i3) = quantiles(beta_ind);
    let gamma_ok = gamma_med.iter().all(|e| *e <= 0.1);
    outcome(
        failures == 0 && gamma_ok && theta_ok && q3 - q1 <= i3 - i1,
        format!(
            "gamma median abs err {:.3?} (tol 0.1); {}; beta IQR low-rank {:.4} vs independence {:.4}; {converged}/20 low-rank and {ind_converged}/20 independence fits converged, {failures} failed",
            gamma_med,
            theta_txt.join(", "),
            q3 - q1,
            i3 - i1
        ),
    )
}

fn criterion_10() -> Outcome {
    let b = model_check::check_buffer(10_000, 10);
    let s = model_check::check_server(10_000, 10);
    let violations: Vec<&String> = b.violations.iter().chain(&s.violations).take(3).collect();
    outcome(
        violations.is_empty(),
        format!(
            "buffer {} ops, server {} ops ({} aggregations), violations {:?}",
            b.ops, s.ops, s.aggregations, violations
        ),
    )
}

fn criterion_11() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.cfg");
    let cfg = cfg.to_str().unwrap();
    let mut same = true;
    let mut ran = true;
    for cmd in ["run-sync", "run-async"] {
        let mut outputs = Vec::new();
        for k in 0..2 {
            let out = dir.path().join(format!("{cmd}-{k}.csv"));
            let status = Command::new(env!("CARGO_BIN_EXE_fedgp"))
                .args([cmd, "--config", cfg, "--seed", "3", "--out", out.to_str().unwrap()])
                .output()
                .expect("binary runs")
                .status;
            ran &= status.success();
            outputs.push(std::fs::read(&out).unwrap_or_default());
        }
        same &= !outputs[0].is_empty() && outputs[0] == outputs[1];
    }
    outcome(ran && same, format!("run-sync and run-async twice each: exit ok {ran}, byte-identical {same}"))
}

fn main() {
    let started = Instant::now();
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut timed = |id: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        results.push((id, name, o, t.elapsed().as_secs_f64()));
    };

    timed(1, "gradient correctness", &mut criterion_1);
    timed(2, "ELBO identity", &mut criterion_2);
    timed(3, "KL inequality", &mut criterion_3);

    let ds = gen_dataset(&desk_data(DESK_SEED)).unwrap();
    let init = initial_params(&ds.shards, &ds.knots, Smoothness::Half).unwrap();
    let f_hat = reference_minimum(&ds.shards, &ds.knots, MODE, &init, REFERENCE_ITERS).unwrap();
    let mut desk = Desk {
        ds,
        init,
        f_hat,
        sequences: Vec::new(),
    };
    let mut extra = Vec::new();
    timed(4, "sync/async equivalence", &mut || criterion_4(&mut desk));
    timed(6, "linear convergence probe", &mut || criterion_6(&mut desk));
    timed(7, "straggler advantage", &mut || criterion_7(&mut desk));
    timed(8, "strategy ablation", &mut || criterion_8(&mut desk));
    timed(9, "parameter recovery", &mut || criterion_9(&mut extra));
    timed(5, "block-descent monotonicity", &mut || criterion_5(&desk, &extra));
    timed(10, "protocol model checks", &mut criterion_10);
    timed(11, "CLI determinism", &mut criterion_11);

    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (id, name, o, secs) in &results {
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {id:>2} {}: {name}: {} [{secs:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.0}s",
        results.len() - failed,
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
