//! Run configuration files.
//!
//! The format is flat `key = value` lines grouped under `[data]`, `[kernel]`,
//! `[sync]`, `[async]` and `[sim]` headers. `#` starts a comment line.
//! Every key is optional; unknown sections, unknown keys and repeated keys
//! are errors. `configs/desk.cfg` lists every key with its default.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fedgp_core::data::{DataConfig, PartitionScheme};
use fedgp_core::kernel::{KernelParams, NoisePrecision, Smoothness};
use fedgp_core::lowrank::ResidualMode;
use fedgp_core::protocol::{AsyncConfig, Strategies};
use fedgp_core::sync::{StepSize, SyncConfig};
use fedgp_core::{Error, Result};

use crate::compute::ComputeModel;
use crate::simulate::SimOptions;

const SECTIONS: [&str; 5] = ["data", "kernel", "sync", "async", "sim"];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    /// Load this dataset directory instead of generating one.
    pub data_dir: Option<PathBuf>,
    pub mode: ResidualMode,
    pub sync: SyncConfig,
    pub async_cfg: AsyncConfig,
    pub model: ComputeModel,
    pub sim: SimOptions,
}

impl RunConfig {
    /// The desk-scale instance: `J = 5`, `n_j = 200`, `m = 50`, `ν = 1/2`,
    /// effective range 0.3, full-local residuals.
    pub fn desk(seed: u64) -> Self {
        let j = 5;
        RunConfig {
            data: DataConfig::standard(j, 200, 50, Smoothness::Half, 0.3, seed),
            data_dir: None,
            mode: ResidualMode::FullLocal,
            sync: SyncConfig::default(),
            async_cfg: AsyncConfig::with_threshold(default_threshold(j), j),
            model: ComputeModel::uniform(j),
            sim: SimOptions {
                seed,
                ..SimOptions::default()
            },
        }
    }

    /// Replaces the seed of both data generation and the network model.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.seed = seed;
        self.sim.seed = seed;
        self
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        text.parse()
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.sync.validate()?;
        self.async_cfg.validate(self.data.j)?;
        self.model.validate(self.data.j)
    }
}

/// `⌈0.2·J⌉`, the threshold used for the heterogeneity experiments.
pub fn default_threshold(j: usize) -> usize {
    j.div_ceil(5).max(1)
}

struct Entries {
    map: BTreeMap<(String, String), (String, usize)>,
}

impl Entries {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !SECTIONS.contains(&name) {
                    return Err(Error::Config(format!("line {line_no}: unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {line_no}: expected 'key = value'")));
            };
            let Some(sec) = section.clone() else {
                return Err(Error::Config(format!("line {line_no}: key outside of any section")));
            };
            let key = key.trim().to_string();
            let prev = map.insert((sec.clone(), key.clone()), (value.trim().to_string(), line_no));
            if prev.is_some() {
                return Err(Error::Config(format!("line {line_no}: [{sec}] {key} given twice")));
            }
        }
        Ok(Entries { map })
    }

    fn take<T: FromStr>(&mut self, section: &str, key: &str) -> Result<Option<T>> {
        match self.map.remove(&(section.to_string(), key.to_string())) {
            None => Ok(None),
            Some((v, line)) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("line {line}: cannot parse [{section}] {key} = '{v}'"))),
        }
    }

    fn take_list<T: FromStr>(&mut self, section: &str, key: &str) -> Result<Option<Vec<T>>> {
        match self.map.remove(&(section.to_string(), key.to_string())) {
            None => Ok(None),
            Some((v, line)) => v
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<std::result::Result<Vec<T>, _>>()
                .map(Some)
                .map_err(|_| Error::Config(format!("line {line}: cannot parse [{section}] {key} = '{v}'"))),
        }
    }

    fn finish(self) -> Result<()> {
        match self.map.iter().next() {
            None => Ok(()),
            Some(((sec, key), (_, line))) => Err(Error::Config(format!("line {line}: unknown key [{sec}] {key}"))),
        }
    }
}

fn parse_strategies(s: &str) -> Result<Strategies> {
    match s.trim() {
        "all" => return Ok(Strategies::ALL),
        "none" => return Ok(Strategies::NONE),
        _ => {}
    }
    let mut out = Strategies::NONE;
    for part in s.split(',') {
        match part.trim() {
            "correction" => out.correction = true,
            "weights" => out.adaptive_weights = true,
            "moving-average" => out.moving_average = true,
            other => return Err(Error::Config(format!("unknown strategy '{other}'"))),
        }
    }
    Ok(out)
}

/// `index:factor`, e.g. `0:8`.
fn parse_straggler(s: &str) -> Result<(usize, f64)> {
    let bad = || Error::Config(format!("straggler must look like 'worker:factor', got '{s}'"));
    let (w, f) = s.split_once(':').ok_or_else(bad)?;
    Ok((w.trim().parse().map_err(|_| bad())?, f.trim().parse().map_err(|_| bad())?))
}

impl FromStr for RunConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut e = Entries::parse(text)?;
        let seed = e.take("data", "seed")?.unwrap_or(0);
        let mut cfg = RunConfig::desk(seed);

        let d = &mut cfg.data;
        if let Some(v) = e.take("data", "workers")? {
            d.j = v;
        }
        if let Some(v) = e.take("data", "n_per_worker")? {
            d.n_per_worker = v;
        }
        if let Some(v) = e.take("data", "knots")? {
            d.m = v;
        }
        if let Some(v) = e.take_list::<f64>("data", "gamma")? {
            d.p = v.len();
            d.gamma_true = v;
        }
        if let Some(v) = e.take("data", "delta")? {
            d.delta = NoisePrecision::new(v)?;
        }
        if let Some(v) = e.take::<String>("data", "partition")? {
            d.partition = v.parse::<PartitionScheme>()?;
        }
        if let Some(v) = e.take("data", "holdout")? {
            d.holdout = v;
        }
        cfg.data_dir = e.take::<PathBuf>("data", "dir")?;

        let nu = match e.take::<String>("kernel", "nu")? {
            Some(v) => v.parse::<Smoothness>()?,
            None => cfg.data.kernel.nu,
        };
        let sigma2 = e.take("kernel", "sigma2")?.unwrap_or(cfg.data.kernel.sigma2);
        let range: Option<f64> = e.take("kernel", "range")?;
        let beta: Option<f64> = e.take("kernel", "beta")?;
        let beta = match (range, beta) {
            (Some(_), Some(_)) => return Err(Error::Config("give either [kernel] range or beta, not both".into())),
            (Some(r), None) => KernelParams::beta_for_range(nu, r),
            (None, Some(b)) => b,
            (None, None) => KernelParams::beta_for_range(nu, 0.3),
        };
        cfg.data.kernel = KernelParams::new(nu, sigma2, beta)?;
        if let Some(v) = e.take::<String>("kernel", "residual")? {
            cfg.mode = v.parse()?;
        }

        let s = &mut cfg.sync;
        if let Some(v) = e.take("sync", "max_iters")? {
            s.max_iters = v;
        }
        let alpha: Option<f64> = e.take("sync", "step_size")?;
        let decay: Option<f64> = e.take("sync", "step_decay")?;
        s.step_size = step_rule(alpha.unwrap_or(1.0), decay);
        s.mod_threshold = e.take("sync", "mod_threshold")?;
        if let Some(v) = e.take("sync", "grad_tol")? {
            s.grad_tol = v;
        }
        if let Some(v) = e.take("sync", "newton_steps")? {
            s.newton_steps_per_iter = v;
        }

        let j = cfg.data.j;
        let threshold = e.take("async", "agg_threshold")?.unwrap_or(default_threshold(j));
        let mut a = AsyncConfig::with_threshold(threshold, j);
        if let Some(v) = e.take("async", "weight_exponent")? {
            a.weight_exponent = v;
        }
        if let Some(v) = e.take("async", "uniform_after")? {
            a.uniform_after = v;
        }
        if let Some(v) = e.take("async", "omega")? {
            a.omega = v;
        }
        if let Some(v) = e.take("async", "window")? {
            a.window = v;
        }
        let alpha: Option<f64> = e.take("async", "step_size")?;
        let decay: Option<f64> = e.take("async", "step_decay")?;
        if alpha.is_some() || decay.is_some() {
            a.step_size = step_rule(alpha.unwrap_or(a.step_size.at(0)), decay);
        }
        a.mod_threshold = e.take("async", "mod_threshold")?;
        if let Some(v) = e.take("async", "tau_max")? {
            a.tau_max = v;
        }
        if let Some(v) = e.take::<String>("async", "strategies")? {
            a.strategies = parse_strategies(&v)?;
        }
        cfg.async_cfg = a;

        let mut model = ComputeModel::uniform(j);
        if let Some(v) = e.take_list::<f64>("sim", "speeds")? {
            model.speeds = v;
        }
        if let Some(v) = e.take::<String>("sim", "straggler")? {
            let (w, f) = parse_straggler(&v)?;
            if w >= j {
                return Err(Error::Config(format!("straggler worker {w} out of range for {j} workers")));
            }
            model = model.with_straggler(w, f);
        }
        for (key, slot) in [
            ("c0", &mut model.c0),
            ("c1", &mut model.c1),
            ("c2", &mut model.c2),
            ("delta_theta_factor", &mut model.delta_theta_factor),
            ("latency", &mut model.latency),
            ("jitter", &mut model.jitter),
        ] {
            if let Some(v) = e.take("sim", key)? {
                *slot = v;
            }
        }
        cfg.model = model;
        if let Some(v) = e.take("sim", "max_iters")? {
            cfg.sim.max_iters = v;
        }
        if let Some(v) = e.take("sim", "max_time")? {
            cfg.sim.max_time = v;
        }
        e.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn step_rule(initial: f64, decay: Option<f64>) -> StepSize {
    match decay {
        Some(decay) if decay > 0.0 => StepSize::InverseDecay { initial, decay },
        _ => StepSize::Constant(initial),
    }
}
