//! Simulated spatial datasets: jittered-grid locations and knots, Gaussian
//! covariates, an exact Matérn latent field, noisy responses, and the
//! three ways of splitting rows across workers.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kernel::{cov_matrix, KernelParams, Location, NoisePrecision, Smoothness};
use crate::linalg::SpdFactor;
use crate::lowrank::{knot_covariance, KnotSet, ModelParams, WorkerShard};

/// Random substreams, one per purpose.
mod stream {
    pub const LOCATIONS: u64 = 0;
    pub const KNOTS: u64 = 1;
    pub const HOLDOUT: u64 = 2;
    pub const COVARIATES: u64 = 3;
    pub const LATENT: u64 = 4;
    pub const NOISE: u64 = 5;
    pub const PARTITION: u64 = 6;
}

fn rng_for(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartitionScheme {
    Random,
    AreaBased,
    RandomNeighboring(usize),
}

impl fmt::Display for PartitionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PartitionScheme::Random => f.write_str("random"),
            PartitionScheme::AreaBased => f.write_str("area"),
            PartitionScheme::RandomNeighboring(k) => write!(f, "neighboring:{k}"),
        }
    }
}

impl FromStr for PartitionScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "random" => Ok(PartitionScheme::Random),
            "area" => Ok(PartitionScheme::AreaBased),
            other => match other.strip_prefix("neighboring:") {
                Some(k) => k
                    .parse()
                    .map(PartitionScheme::RandomNeighboring)
                    .map_err(|_| Error::Config(format!("bad neighbor count in '{other}'"))),
                None => Err(Error::Config(format!("unknown partition scheme '{other}'"))),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub j: usize,
    pub n_per_worker: usize,
    pub m: usize,
    pub p: usize,
    pub kernel: KernelParams,
    pub delta: NoisePrecision,
    pub gamma_true: Vec<f64>,
    pub seed: u64,
    pub partition: PartitionScheme,
    pub holdout: usize,
}

impl DataConfig {
    /// Five standard-Gaussian covariates with `γ = (−1, 2, 1, 1, 1)`, `δ = 0.25`, `σ² = 1`.
    pub fn standard(j: usize, n_per_worker: usize, m: usize, nu: Smoothness, range: f64, seed: u64) -> Self {
        DataConfig {
            j,
            n_per_worker,
            m,
            p: 5,
            kernel: KernelParams {
                nu,
                sigma2: 1.0,
                beta: KernelParams::beta_for_range(nu, range),
            },
            delta: NoisePrecision::new(0.25).expect("positive"),
            gamma_true: vec![-1.0, 2.0, 1.0, 1.0, 1.0],
            seed,
            partition: PartitionScheme::Random,
            holdout: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.j == 0 || self.n_per_worker == 0 || self.m == 0 || self.p == 0 {
            return Err(Error::Config("J, n_per_worker, m and p must all be at least 1".into()));
        }
        if self.gamma_true.len() != self.p {
            return Err(Error::Config(format!(
                "gamma_true has {} entries but p = {}",
                self.gamma_true.len(),
                self.p
            )));
        }
        if self.partition == PartitionScheme::AreaBased && !is_perfect_square(self.j) {
            return Err(Error::Config(format!("area-based partitioning needs a square J, got {}", self.j)));
        }
        self.kernel.validate()
    }
}

fn is_perfect_square(j: usize) -> bool {
    let r = (j as f64).sqrt().round() as usize;
    r * r == j
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub shards: Vec<WorkerShard>,
    pub knots: KnotSet,
    /// Generating parameters, with `μ = 0` and `Σ = K`.
    pub truth: ModelParams,
    pub holdout: Option<WorkerShard>,
    pub seed: u64,
}

impl Dataset {
    pub fn n_total(&self) -> usize {
        self.shards.iter().map(|s| s.len()).sum()
    }
}

/// `⌈√count⌉²` unit-grid points with `U[−0.4, 0.4]` jitter, mapped into
/// `[0, 1]²`; a seeded random subset of `count` of them is returned.
pub fn gen_locations(count: usize, seed: u64) -> Vec<Location> {
    gen_locations_with(count, &mut rng_for(seed, stream::LOCATIONS))
}

fn gen_locations_with(count: usize, rng: &mut ChaCha8Rng) -> Vec<Location> {
    if count == 0 {
        return Vec::new();
    }
    let g = (count as f64).sqrt().ceil() as usize;
    let span = (g - 1) as f64 + 0.8;
    let mut pts = Vec::with_capacity(g * g);
    for i in 0..g {
        for j in 0..g {
            let x = i as f64 + rng.random_range(-0.4..=0.4);
            let y = j as f64 + rng.random_range(-0.4..=0.4);
            pts.push(Location([(x + 0.4) / span, (y + 0.4) / span]));
        }
    }
    if pts.len() > count {
        pts.shuffle(rng);
        pts.truncate(count);
    }
    pts
}

fn standard_normals(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Draws a dataset from the exact Gaussian process.
pub fn gen_dataset(cfg: &DataConfig) -> Result<Dataset> {
    cfg.validate()?;
    let n = cfg.j * cfg.n_per_worker;
    let locs = gen_locations(n, cfg.seed);
    let knots = KnotSet::new(gen_locations_with(cfg.m, &mut rng_for(cfg.seed, stream::KNOTS)))?;
    let hold_locs = gen_locations_with(cfg.holdout, &mut rng_for(cfg.seed, stream::HOLDOUT));
    let all_locs: Vec<Location> = locs.iter().chain(&hold_locs).copied().collect();
    let total = all_locs.len();

    let mut cov_rng = rng_for(cfg.seed, stream::COVARIATES);
    let x = DMatrix::from_fn(total, cfg.p, |_, _| cov_rng.sample(StandardNormal));
    let c = cov_matrix(&all_locs, &cfg.kernel);
    let factor = SpdFactor::new(&c, "latent covariance C(S, S)")?;
    let latent = factor.l() * standard_normals(&mut rng_for(cfg.seed, stream::LATENT), total);
    let noise = standard_normals(&mut rng_for(cfg.seed, stream::NOISE), total) * cfg.delta.variance().sqrt();
    let gamma = DVector::from_column_slice(&cfg.gamma_true);
    let z = &x * &gamma + latent + noise;

    let rows: Vec<usize> = (0..n).collect();
    let assignment = partition(&locs, &rows, cfg.partition, cfg.j, cfg.seed)?;
    let shards = assignment
        .iter()
        .enumerate()
        .map(|(id, idx)| shard_from_rows(id, idx, &all_locs, &z, &x))
        .collect::<Result<Vec<_>>>()?;
    let holdout = if cfg.holdout > 0 {
        let idx: Vec<usize> = (n..total).collect();
        Some(shard_from_rows(cfg.j, &idx, &all_locs, &z, &x)?)
    } else {
        None
    };
    let (k, _) = knot_covariance(&knots, &cfg.kernel)?;
    let truth = ModelParams {
        mu: DVector::zeros(cfg.m),
        sigma: k,
        gamma,
        delta: cfg.delta,
        kernel: cfg.kernel,
    };
    Ok(Dataset {
        shards,
        knots,
        truth,
        holdout,
        seed: cfg.seed,
    })
}

fn shard_from_rows(id: usize, idx: &[usize], locs: &[Location], z: &DVector<f64>, x: &DMatrix<f64>) -> Result<WorkerShard> {
    WorkerShard::new(
        id,
        idx.iter().map(|&i| locs[i]).collect(),
        DVector::from_iterator(idx.len(), idx.iter().map(|&i| z[i])),
        DMatrix::from_fn(idx.len(), x.ncols(), |r, c| x[(idx[r], c)]),
    )
}

/// Splits `rows` (indices into `locs`) into `j` equal shards. When the row
/// count is not a multiple of `j`, the trailing remainder is dropped.
pub fn partition(
    locs: &[Location],
    rows: &[usize],
    scheme: PartitionScheme,
    j: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if j == 0 {
        return Err(Error::Config("worker count must be at least 1".into()));
    }
    let per = rows.len() / j;
    if per == 0 {
        return Err(Error::Config(format!("{} rows cannot fill {j} workers", rows.len())));
    }
    let mut rng = rng_for(seed, stream::PARTITION);
    let ordered: Vec<usize> = match scheme {
        PartitionScheme::Random => {
            let mut r = rows.to_vec();
            r.shuffle(&mut rng);
            r
        }
        PartitionScheme::AreaBased => {
            if !is_perfect_square(j) {
                return Err(Error::Config(format!("area-based partitioning needs a square J, got {j}")));
            }
            return Ok(area_blocks(locs, &rows[..per * j], j));
        }
        PartitionScheme::RandomNeighboring(k) => neighbor_groups(locs, rows, k, &mut rng),
    };
    Ok(ordered.chunks(per).take(j).map(|c| c.to_vec()).collect())
}

/// `√J` vertical strips of equal count, each cut into `√J` blocks by `y`.
fn area_blocks(locs: &[Location], rows: &[usize], j: usize) -> Vec<Vec<usize>> {
    let side = (j as f64).sqrt().round() as usize;
    let per = rows.len() / j;
    let mut by_x = rows.to_vec();
    by_x.sort_by(|&a, &b| locs[a].x().total_cmp(&locs[b].x()).then(a.cmp(&b)));
    let mut out = Vec::with_capacity(j);
    for strip in by_x.chunks(per * side) {
        let mut s = strip.to_vec();
        s.sort_by(|&a, &b| locs[a].y().total_cmp(&locs[b].y()).then(a.cmp(&b)));
        out.extend(s.chunks(per).map(|c| c.to_vec()));
    }
    out
}

/// Orders rows as consecutive groups of a random unassigned seed point and
/// its `k` nearest unassigned neighbors (fewer once the pool runs low).
fn neighbor_groups(locs: &[Location], rows: &[usize], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut unassigned: Vec<usize> = rows.to_vec();
    let mut out = Vec::with_capacity(rows.len());
    while !unassigned.is_empty() {
        let pick = rng.random_range(0..unassigned.len());
        let seed_row = unassigned.swap_remove(pick);
        out.push(seed_row);
        let take = k.min(unassigned.len());
        if take == 0 {
            continue;
        }
        let origin = locs[seed_row];
        unassigned.sort_by(|&a, &b| {
            origin
                .dist(&locs[a])
                .total_cmp(&origin.dist(&locs[b]))
                .then(a.cmp(&b))
        });
        out.extend(unassigned.drain(..take));
    }
    out
}

fn fmt_row(values: impl IntoIterator<Item = f64>) -> String {
    values.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn shard_csv(shards: &[&WorkerShard], p: usize) -> String {
    let mut out = String::from("worker_id,s1,s2,z");
    for c in 1..=p {
        out.push_str(&format!(",x{c}"));
    }
    out.push('\n');
    for s in shards {
        for i in 0..s.len() {
            let row = s.x.row(i);
            let vals = [s.locs[i].x(), s.locs[i].y(), s.z[i]].into_iter().chain(row.iter().copied());
            out.push_str(&format!("{},{}\n", s.id, fmt_row(vals)));
        }
    }
    out
}

/// Writes `data.csv`, `knots.csv`, `truth.txt` and, when present, `holdout.csv` into `dir`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let p = ds.truth.p();
    let shards: Vec<&WorkerShard> = ds.shards.iter().collect();
    fs::write(dir.join("data.csv"), shard_csv(&shards, p))?;
    if let Some(h) = &ds.holdout {
        fs::write(dir.join("holdout.csv"), shard_csv(&[h], p))?;
    }
    let mut knots = String::from("s1,s2\n");
    for k in ds.knots.locations() {
        knots.push_str(&format!("{},{}\n", k.x(), k.y()));
    }
    fs::write(dir.join("knots.csv"), knots)?;
    let t = &ds.truth;
    let mut truth = format!(
        "nu={}\nsigma2={}\nbeta={}\ndelta={}\n",
        t.kernel.nu,
        t.kernel.sigma2,
        t.kernel.beta,
        t.delta.get()
    );
    for (i, g) in t.gamma.iter().enumerate() {
        truth.push_str(&format!("gamma_{}={g}\n", i + 1));
    }
    truth.push_str(&format!("seed={}\n", ds.seed));
    fs::write(dir.join("truth.txt"), truth)?;
    Ok(())
}

fn parse_f64(field: &str, what: &str) -> Result<f64> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Input(format!("cannot parse {what} '{field}'")))
}

fn read_shards(path: &Path) -> Result<(Vec<WorkerShard>, usize)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Input(format!("{} is empty", path.display())))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 5 || cols[..4] != ["worker_id", "s1", "s2", "z"] {
        return Err(Error::Input(format!("{}: unexpected header '{header}'", path.display())));
    }
    let p = cols.len() - 4;
    let mut rows: BTreeMap<usize, (Vec<Location>, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != cols.len() {
            return Err(Error::Input(format!("{} line {}: wrong field count", path.display(), ln + 2)));
        }
        let id: usize = f[0]
            .trim()
            .parse()
            .map_err(|_| Error::Input(format!("bad worker id '{}'", f[0])))?;
        let entry = rows.entry(id).or_default();
        entry.0.push(Location::new(parse_f64(f[1], "s1")?, parse_f64(f[2], "s2")?)?);
        entry.1.push(parse_f64(f[3], "z")?);
        for v in &f[4..] {
            entry.2.push(parse_f64(v, "covariate")?);
        }
    }
    let shards = rows
        .into_iter()
        .map(|(id, (locs, z, x))| {
            let n = locs.len();
            WorkerShard::new(id, locs, DVector::from_vec(z), DMatrix::from_row_slice(n, p, &x))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((shards, p))
}

/// Reads a directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let (shards, p) = read_shards(&dir.join("data.csv"))?;
    for (i, s) in shards.iter().enumerate() {
        if s.id != i {
            return Err(Error::Input(format!("worker ids must be 0..J-1, found {}", s.id)));
        }
    }
    let holdout_path = dir.join("holdout.csv");
    let holdout = if holdout_path.exists() {
        read_shards(&holdout_path)?.0.into_iter().next()
    } else {
        None
    };
    let knot_text = fs::read_to_string(dir.join("knots.csv"))?;
    let mut knots = Vec::new();
    for line in knot_text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let (a, b) = line
            .split_once(',')
            .ok_or_else(|| Error::Input(format!("bad knot line '{line}'")))?;
        knots.push(Location::new(parse_f64(a, "knot s1")?, parse_f64(b, "knot s2")?)?);
    }
    let knots = KnotSet::new(knots)?;
    let truth_text = fs::read_to_string(dir.join("truth.txt"))?;
    let kv: BTreeMap<&str, &str> = truth_text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim(), v.trim()))
        .collect();
    let get = |k: &str| kv.get(k).copied().ok_or_else(|| Error::Input(format!("truth file lacks '{k}'")));
    let nu: Smoothness = get("nu")?.parse()?;
    let kernel = KernelParams::new(nu, parse_f64(get("sigma2")?, "sigma2")?, parse_f64(get("beta")?, "beta")?)?;
    let gamma = (1..=p)
        .map(|i| parse_f64(get(&format!("gamma_{i}"))?, "gamma"))
        .collect::<Result<Vec<_>>>()?;
    let seed = get("seed")?
        .parse()
        .map_err(|_| Error::Input("bad seed in truth file".into()))?;
    let (k, _) = knot_covariance(&knots, &kernel)?;
    let truth = ModelParams {
        mu: DVector::zeros(knots.len()),
        sigma: k,
        gamma: DVector::from_vec(gamma),
        delta: NoisePrecision::new(parse_f64(get("delta")?, "delta")?)?,
        kernel,
    };
    Ok(Dataset {
        shards,
        knots,
        truth,
        holdout,
        seed,
    })
}
