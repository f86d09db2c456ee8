use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedgp_core::data::save_dataset;
use fedgp_core::{Error, Result};
use fedgp_sim::ablation::ablate_strategies;
use fedgp_sim::config::RunConfig;
use fedgp_sim::experiments::{dataset, eval_predict, gradient_suite, kl_sweep, start};
use fedgp_sim::output::{kl_csv, trace_csv, write_text};
use fedgp_sim::probe::{reference_minimum, theory_probe, REFERENCE_ITERS};
use fedgp_sim::simulate::{run_simulation, EventTrace, Protocol, SimOptions};

const EXIT_VALIDATION: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_USAGE: u8 = 64;

/// Federated low-rank Gaussian-process estimation on simulated workers.
#[derive(Parser, Debug)]
#[command(name = "fedgp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Configuration file; the desk-scale defaults are used without one.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the data and network seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset and write it as CSV files.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Run the synchronous estimator and write its trace.
    RunSync {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "trace_sync.csv")]
        out: PathBuf,
    },
    /// Run the asynchronous estimator and write its trace.
    RunAsync {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "trace_async.csv")]
        out: PathBuf,
    },
    /// Run the five strategy variants and write one trace each.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
    /// Compare KL divergences of the low-rank and independence models.
    CompareKl {
        #[command(flatten)]
        common: Common,
        /// Knot counts.
        #[arg(long, value_delimiter = ',', default_value = "10,20,50,100")]
        m: Vec<usize>,
        #[arg(long, default_value = "kl.csv")]
        out: PathBuf,
    },
    /// Check every analytic derivative against finite differences.
    ValidateGradients {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 3)]
        instances: usize,
    },
    /// Fit both models and score predictions on the holdout set.
    EvalPredict {
        #[command(flatten)]
        common: Common,
    },
    /// Report the suboptimality rate of sync and async runs.
    ProbeTheory {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "probe.csv")]
        out: PathBuf,
    },
}

fn load(common: &Common) -> Result<RunConfig> {
    let cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::desk(0),
    };
    Ok(match common.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

/// Writes the trace and maps a recorded numerical failure to an error.
fn finish_trace(trace: &EventTrace, out: &Path) -> Result<()> {
    write_text(out, &trace_csv(trace))?;
    if let Some(last) = trace.rows.last() {
        let t = last.theta.0;
        println!(
            "{} aggregations, iteration {}, f = {:.6}, delta = {:.4}, sigma2 = {:.4}, beta = {:.4}, virtual time {:.3} s",
            trace.rows.len(),
            last.iter,
            last.f,
            t[0],
            t[1],
            t[2],
            last.virtual_time
        );
    }
    println!("trace written to {}", out.display());
    match &trace.failure {
        Some(msg) => Err(Error::numerical("run", msg.clone())),
        None => Ok(()),
    }
}

fn run(cmd: Command) -> Result<u8> {
    match cmd {
        Command::GenData { common, out } => {
            let cfg = load(&common)?;
            let ds = dataset(&cfg)?;
            save_dataset(&ds, &out)?;
            println!("{} rows on {} workers, {} knots, written to {}", ds.n_total(), ds.shards.len(), ds.knots.len(), out.display());
        }
        Command::RunSync { common, out } => {
            let cfg = load(&common)?;
            let ds = dataset(&cfg)?;
            let init = start(&cfg, &ds)?;
            let opts = SimOptions {
                max_iters: cfg.sync.max_iters,
                ..cfg.sim
            };
            let trace = run_simulation(&ds.shards, &ds.knots, cfg.mode, &Protocol::Sync(cfg.sync), &cfg.model, &opts, &init)?;
            finish_trace(&trace, &out)?;
        }
        Command::RunAsync { common, out } => {
            let cfg = load(&common)?;
            let ds = dataset(&cfg)?;
            let init = start(&cfg, &ds)?;
            let trace = run_simulation(&ds.shards, &ds.knots, cfg.mode, &Protocol::Async(cfg.async_cfg), &cfg.model, &cfg.sim, &init)?;
            finish_trace(&trace, &out)?;
        }
        Command::Ablate { common, out } => {
            let cfg = load(&common)?;
            let ds = dataset(&cfg)?;
            let init = start(&cfg, &ds)?;
            let f_hat = reference_minimum(&ds.shards, &ds.knots, cfg.mode, &init, REFERENCE_ITERS)?;
            let variants = ablate_strategies(&ds.shards, &ds.knots, cfg.mode, &cfg.async_cfg, &cfg.model, &cfg.sim, &init)?;
            println!("variant,aggregations_to_target,virtual_time_to_target,final_v_ratio,failure");
            for v in &variants {
                let v0 = v.trace.initial_f - f_hat;
                let reach = v.trace.first_reaching(f_hat + 0.01 * v0);
                let last = v.trace.rows.last().map_or(v.trace.initial_f, |r| r.f);
                println!(
                    "{},{},{},{:e},{}",
                    v.name,
                    reach.map_or("-".into(), |r| r.1.to_string()),
                    reach.map_or("-".into(), |r| format!("{:.4}", r.0)),
                    (last - f_hat) / v0,
                    v.trace.failure.as_deref().unwrap_or("")
                );
                write_text(&out.join(format!("{}.csv", v.name)), &trace_csv(&v.trace))?;
            }
        }
        Command::CompareKl { common, m, out } => {
            let cfg = load(&common)?;
            if m.is_empty() {
                return Err(Error::Config("--m needs at least one knot count".into()));
            }
            let rows = kl_sweep(&cfg.data, &m)?;
            let text = kl_csv(&rows);
            print!("{text}");
            write_text(&out, &text)?;
        }
        Command::ValidateGradients { common, instances } => {
            let cfg = load(&common)?;
            let r = gradient_suite(&cfg.data, instances)?;
            println!("max relative error: first order {:.3e}, second order {:.3e}", r.first_order, r.second_order);
            if !(r.first_order <= 1e-5 && r.second_order <= 1e-4) {
                println!("FAIL: tolerance is 1e-5 (first order) and 1e-4 (second order)");
                return Ok(EXIT_VALIDATION);
            }
        }
        Command::EvalPredict { common } => {
            let cfg = load(&common)?;
            let ds = dataset(&cfg)?;
            let r = eval_predict(&cfg, &ds)?;
            println!("holdout rows: {}", r.n_holdout);
            println!("rmse low-rank: {:.6}", r.rmse_lowrank);
            println!("rmse independence: {:.6}", r.rmse_indep);
        }
        Command::ProbeTheory { common, out } => {
            let cfg = load(&common)?;
            let ds = dataset(&cfg)?;
            let init = start(&cfg, &ds)?;
            let f_hat = reference_minimum(&ds.shards, &ds.knots, cfg.mode, &init, REFERENCE_ITERS)?;
            let mut csv = String::from("protocol,iter,v\n");
            let sync_opts = SimOptions {
                max_iters: cfg.sync.max_iters,
                ..cfg.sim
            };
            let runs = [
                (Protocol::Sync(cfg.sync), sync_opts, cfg.sync.step_size.at(0)),
                (Protocol::Async(cfg.async_cfg), cfg.sim, cfg.async_cfg.step_size.at(0)),
            ];
            for (proto, opts, alpha) in runs {
                let trace = run_simulation(&ds.shards, &ds.knots, cfg.mode, &proto, &cfg.model, &opts, &init)?;
                let p = theory_probe(&trace, f_hat, alpha, 5, 40, 1e-10)?;
                println!(
                    "{}: slope {:.4} r2 {:.4} over iterations {}..={}, V_final/V0 {:.3e}, tau_max {}, tau_mean {:.3}, alpha {}",
                    proto.name(),
                    p.slope,
                    p.r2,
                    p.window.0,
                    p.window.1,
                    p.v_final() / p.v0,
                    p.tau_max,
                    p.tau_mean,
                    p.alpha
                );
                for (t, v) in &p.v {
                    csv.push_str(&format!("{},{t},{v}\n", proto.name()));
                }
            }
            write_text(&out, &csv)?;
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_VALIDATION })
        }
    }
}
