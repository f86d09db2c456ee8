//! Knots-based low-rank model and the decoupled objective
//! `f(μ, Σ, γ, δ, θ) = Σ_j f_j + h`.
//!
//! Each worker holds `B_j = C(S_j, S*) K⁻¹`, the knot covariance
//! `K = C(S*, S*)` and a residual-plus-noise covariance `R_j` whose form
//! depends on [`ResidualMode`]. Minimizing `f` over `(μ, Σ)` gives the
//! negative low-rank log-likelihood (without the `N/2·log 2π` constant).

mod derivs;

pub use derivs::{
    cross_partials, grad_hess_thetatilde, h_grad_hess_thetatilde, local_theta_derivatives,
    CrossPartials, ThetaDerivatives,
};
pub(crate) use derivs::{DerivMat, GaussianTerm};

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Vector3};

use crate::error::{Error, Result};
use crate::kernel::{cov_matrix, cross_cov, KernelParams, Location, NoisePrecision};
use crate::linalg::{symmetrize, SpdFactor};

/// Lower/upper bounds used when projecting `θ̃` back to the positive orthant.
pub const THETA_LOWER: f64 = 1e-8;
pub const THETA_UPPER: f64 = 1e8;

/// Shared knot locations `S*`.
#[derive(Clone, Debug, PartialEq)]
pub struct KnotSet {
    knots: Vec<Location>,
}

impl KnotSet {
    pub fn new(knots: Vec<Location>) -> Result<Self> {
        if knots.is_empty() {
            return Err(Error::Input("knot set must be non-empty".into()));
        }
        for (i, a) in knots.iter().enumerate() {
            if !(a.x().is_finite() && a.y().is_finite()) {
                return Err(Error::Input(format!("knot {i} is not finite")));
            }
            if knots[..i].iter().any(|b| b == a) {
                return Err(Error::Input(format!("knot {i} duplicates an earlier knot")));
            }
        }
        Ok(Self { knots })
    }

    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    pub fn locations(&self) -> &[Location] {
        &self.knots
    }

    /// Logs a warning when the knot count is not small relative to `n_total`.
    pub fn check_against_sample_size(&self, n_total: usize) {
        if 2 * self.len() > n_total {
            log::warn!("knot count {} exceeds half the sample size {n_total}", self.len());
        }
    }
}

/// One worker's local data `(S_j, z_j, X_j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct WorkerShard {
    pub id: usize,
    pub locs: Vec<Location>,
    pub z: DVector<f64>,
    pub x: DMatrix<f64>,
}

impl WorkerShard {
    pub fn new(id: usize, locs: Vec<Location>, z: DVector<f64>, x: DMatrix<f64>) -> Result<Self> {
        let n = locs.len();
        if n == 0 {
            return Err(Error::Input(format!("worker {id} has no observations")));
        }
        if z.len() != n || x.nrows() != n {
            return Err(Error::Input(format!(
                "worker {id}: {n} locations but {} responses and {} covariate rows",
                z.len(),
                x.nrows()
            )));
        }
        Ok(Self { id, locs, z, x })
    }

    pub fn len(&self) -> usize {
        self.locs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locs.is_empty()
    }

    pub fn n_covariates(&self) -> usize {
        self.x.ncols()
    }

    /// `z - Xγ`.
    pub fn residual(&self, gamma: &DVector<f64>) -> DVector<f64> {
        &self.z - &self.x * gamma
    }
}

/// Covariance of the residual process `w̃` within a worker.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ResidualMode {
    /// `w̃ = 0`, so `R_j = δ⁻¹I`.
    PredictiveProcess,
    /// Independent residuals restoring the marginal variance.
    ModifiedPredictiveProcess,
    /// Exact within-worker residual covariance.
    FullLocal,
}

impl ResidualMode {
    pub const ALL: [ResidualMode; 3] = [
        ResidualMode::PredictiveProcess,
        ResidualMode::ModifiedPredictiveProcess,
        ResidualMode::FullLocal,
    ];
}

impl fmt::Display for ResidualMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResidualMode::PredictiveProcess => "predictive-process",
            ResidualMode::ModifiedPredictiveProcess => "modified-predictive-process",
            ResidualMode::FullLocal => "full-local",
        })
    }
}

impl FromStr for ResidualMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "predictive-process" | "pp" => Ok(ResidualMode::PredictiveProcess),
            "modified-predictive-process" | "mpp" => Ok(ResidualMode::ModifiedPredictiveProcess),
            "full-local" | "fl" => Ok(ResidualMode::FullLocal),
            other => Err(Error::Input(format!("unknown residual mode '{other}'"))),
        }
    }
}

/// `θ̃ = (δ, σ², β)`, always in this order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThetaTilde(pub [f64; 3]);

impl ThetaTilde {
    pub fn delta(&self) -> f64 {
        self.0[0]
    }

    pub fn sigma2(&self) -> f64 {
        self.0[1]
    }

    pub fn beta(&self) -> f64 {
        self.0[2]
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::from(self.0)
    }

    /// Clamps every entry into `[THETA_LOWER, THETA_UPPER]`.
    pub fn projected(v: Vector3<f64>) -> Self {
        ThetaTilde([
            v[0].clamp(THETA_LOWER, THETA_UPPER),
            v[1].clamp(THETA_LOWER, THETA_UPPER),
            v[2].clamp(THETA_LOWER, THETA_UPPER),
        ])
    }
}

/// The full parameter tuple `φ = (μ, Σ, γ, δ, θ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub gamma: DVector<f64>,
    pub delta: NoisePrecision,
    pub kernel: KernelParams,
}

impl ModelParams {
    pub fn m(&self) -> usize {
        self.mu.len()
    }

    pub fn p(&self) -> usize {
        self.gamma.len()
    }

    pub fn theta_tilde(&self) -> ThetaTilde {
        ThetaTilde([self.delta.get(), self.kernel.sigma2, self.kernel.beta])
    }

    pub fn set_theta_tilde(&mut self, t: ThetaTilde) -> Result<()> {
        self.delta = NoisePrecision::new(t.delta())?;
        let kernel = KernelParams::new(self.kernel.nu, t.sigma2(), t.beta())?;
        self.kernel = kernel;
        Ok(())
    }

    pub fn with_theta_tilde(&self, t: ThetaTilde) -> Result<Self> {
        let mut out = self.clone();
        out.set_theta_tilde(t)?;
        Ok(out)
    }

    /// Checks dimensions, symmetry and positive definiteness of `Σ`.
    pub fn validate(&self) -> Result<()> {
        let m = self.mu.len();
        if self.sigma.nrows() != m || self.sigma.ncols() != m {
            return Err(Error::Input(format!("Sigma must be {m}x{m}")));
        }
        let asym = (&self.sigma - self.sigma.transpose()).amax();
        if asym > 1e-10 * self.sigma.amax().max(1.0) {
            return Err(Error::Input(format!("Sigma is not symmetric (max asymmetry {asym:e})")));
        }
        SpdFactor::new(&self.sigma, "variational covariance Sigma")?;
        self.kernel.validate()?;
        NoisePrecision::new(self.delta.get())?;
        Ok(())
    }

    /// Flattens to the documented wire order: `μ`, `Σ` row-major, `γ`, `δ`, `σ²`, `β`.
    pub fn to_flat(&self) -> Vec<f64> {
        let m = self.m();
        let mut out = Vec::with_capacity(m + m * m + self.p() + 3);
        out.extend(self.mu.iter());
        for i in 0..m {
            for j in 0..m {
                out.push(self.sigma[(i, j)]);
            }
        }
        out.extend(self.gamma.iter());
        out.extend_from_slice(&self.theta_tilde().0);
        out
    }

    pub fn from_flat(values: &[f64], m: usize, p: usize, nu: crate::kernel::Smoothness) -> Result<Self> {
        let expected = m + m * m + p + 3;
        if values.len() != expected {
            return Err(Error::Input(format!(
                "flat parameter vector has {} values, expected {expected}",
                values.len()
            )));
        }
        let mu = DVector::from_column_slice(&values[..m]);
        let sigma = DMatrix::from_row_slice(m, m, &values[m..m + m * m]);
        let gamma = DVector::from_column_slice(&values[m + m * m..m + m * m + p]);
        let t = &values[m + m * m + p..];
        Ok(ModelParams {
            mu,
            sigma,
            gamma,
            delta: NoisePrecision::new(t[0])?,
            kernel: KernelParams::new(nu, t[1], t[2])?,
        })
    }
}

/// Residual-plus-noise covariance `R_j`.
#[derive(Clone, Debug)]
pub enum ResidualCov {
    Diagonal(DVector<f64>),
    Dense { matrix: DMatrix<f64>, factor: SpdFactor },
}

impl ResidualCov {
    pub fn dim(&self) -> usize {
        match self {
            ResidualCov::Diagonal(d) => d.len(),
            ResidualCov::Dense { matrix, .. } => matrix.nrows(),
        }
    }

    pub fn log_det(&self) -> f64 {
        match self {
            ResidualCov::Diagonal(d) => d.iter().map(|v| v.ln()).sum(),
            ResidualCov::Dense { factor, .. } => factor.log_det(),
        }
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        match self {
            ResidualCov::Diagonal(d) => b.component_div(d),
            ResidualCov::Dense { factor, .. } => factor.solve_vec(b),
        }
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            ResidualCov::Diagonal(d) => {
                let mut out = b.clone();
                for (i, mut row) in out.row_iter_mut().enumerate() {
                    row /= d[i];
                }
                out
            }
            ResidualCov::Dense { factor, .. } => factor.solve_mat(b),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            ResidualCov::Diagonal(d) => DMatrix::from_diagonal(d),
            ResidualCov::Dense { matrix, .. } => matrix.clone(),
        }
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        match self {
            ResidualCov::Diagonal(d) => DMatrix::from_diagonal(&d.map(|v| 1.0 / v)),
            ResidualCov::Dense { factor, .. } => factor.inverse(),
        }
    }
}

/// `B_j`, `R_j` and `K` at a fixed `θ̃`, with cached factorizations.
#[derive(Clone, Debug)]
pub struct LowRankPieces {
    pub b: DMatrix<f64>,
    pub r: ResidualCov,
    pub k: DMatrix<f64>,
    k_factor: SpdFactor,
    theta: ThetaTilde,
    mode: ResidualMode,
}

impl LowRankPieces {
    pub fn k_factor(&self) -> &SpdFactor {
        &self.k_factor
    }

    pub fn theta(&self) -> ThetaTilde {
        self.theta
    }

    pub fn mode(&self) -> ResidualMode {
        self.mode
    }

    /// `(BᵀR⁻¹B, BᵀR⁻¹(z − Xγ))`, the local sums of the `(μ, Σ)` update.
    pub fn mu_sigma_sums(&self, shard: &WorkerShard, gamma: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
        let rinv_b = self.r.solve_mat(&self.b);
        let mut btrb = self.b.transpose() * &rinv_b;
        symmetrize(&mut btrb);
        let v = rinv_b.transpose() * shard.residual(gamma);
        (btrb, v)
    }

    /// `(XᵀR⁻¹X, XᵀR⁻¹(z − Bμ))`, the local sums of the `γ` update.
    pub fn gamma_sums(&self, shard: &WorkerShard, mu: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
        let rinv_x = self.r.solve_mat(&shard.x);
        let mut xtrx = shard.x.transpose() * &rinv_x;
        symmetrize(&mut xtrx);
        let v = rinv_x.transpose() * (&shard.z - &self.b * mu);
        (xtrx, v)
    }
}

/// Knot covariance `K(θ)` and its factor.
pub fn knot_covariance(knots: &KnotSet, kernel: &KernelParams) -> Result<(DMatrix<f64>, SpdFactor)> {
    let k = cov_matrix(knots.locations(), kernel);
    let f = SpdFactor::new(&k, "knot covariance K")?;
    Ok((k, f))
}

/// Builds `B_j`, `R_j` and `K` for one worker.
pub fn build_pieces(
    shard: &WorkerShard,
    knots: &KnotSet,
    params: &ModelParams,
    mode: ResidualMode,
) -> Result<LowRankPieces> {
    let kernel = &params.kernel;
    let (k, k_factor) = knot_covariance(knots, kernel)?;
    let u = cross_cov(&shard.locs, knots.locations(), kernel);
    let b = k_factor.solve_mat(&u.transpose()).transpose();
    let noise = params.delta.variance();
    let n = shard.len();
    let r = match mode {
        ResidualMode::PredictiveProcess => ResidualCov::Diagonal(DVector::from_element(n, noise)),
        ResidualMode::ModifiedPredictiveProcess => {
            let d = DVector::from_fn(n, |i, _| {
                let explained: f64 = b.row(i).dot(&u.row(i));
                kernel.sigma2 - explained + noise
            });
            ResidualCov::Diagonal(d)
        }
        ResidualMode::FullLocal => {
            let mut m = cov_matrix(&shard.locs, kernel) - &b * u.transpose();
            symmetrize(&mut m);
            for i in 0..n {
                m[(i, i)] += noise;
            }
            let factor = SpdFactor::new(&m, &format!("residual covariance R_j (worker {})", shard.id))?;
            ResidualCov::Dense { matrix: m, factor }
        }
    };
    Ok(LowRankPieces {
        b,
        r,
        k,
        k_factor,
        theta: params.theta_tilde(),
        mode,
    })
}

/// Per-worker cache of [`LowRankPieces`], rebuilt only when `θ̃` or the mode changes.
#[derive(Clone, Debug, Default)]
pub struct PiecesCache {
    cached: Option<LowRankPieces>,
}

impl PiecesCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(
        &mut self,
        shard: &WorkerShard,
        knots: &KnotSet,
        params: &ModelParams,
        mode: ResidualMode,
    ) -> Result<&LowRankPieces> {
        let theta = params.theta_tilde();
        let stale = match &self.cached {
            Some(p) => p.theta != theta || p.mode != mode,
            None => true,
        };
        if stale {
            self.cached = Some(build_pieces(shard, knots, params, mode)?);
        }
        Ok(self.cached.as_ref().expect("populated above"))
    }

    pub fn invalidate(&mut self) {
        self.cached = None;
    }
}

fn finite_or_err(v: f64, context: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::numerical(context, format!("non-finite value {v}")))
    }
}

/// Local objective
/// `f_j = ½ log det R + ½ tr(BᵀR⁻¹B(Σ + μμᵀ)) − (z−Xγ)ᵀR⁻¹Bμ + ½(z−Xγ)ᵀR⁻¹(z−Xγ)`,
/// evaluated in the completed-square form `½ log det R + ½ tr(R⁻¹BΣBᵀ) + ½ eᵀR⁻¹e`
/// with `e = z − Xγ − Bμ`.
pub fn eval_fj(shard: &WorkerShard, pieces: &LowRankPieces, params: &ModelParams) -> Result<f64> {
    let rinv_b = pieces.r.solve_mat(&pieces.b);
    let btrb = pieces.b.transpose() * &rinv_b;
    let e = shard.residual(&params.gamma) - &pieces.b * &params.mu;
    let rinv_e = pieces.r.solve_vec(&e);
    let value = 0.5 * pieces.r.log_det()
        + 0.5 * crate::linalg::frobenius_dot(&btrb, &params.sigma)
        + 0.5 * e.dot(&rinv_e);
    finite_or_err(value, "local objective f_j")
}

/// Common term `h = KL(N(μ, Σ) ‖ N(0, K))`.
pub fn eval_h(params: &ModelParams, knots: &KnotSet) -> Result<f64> {
    let (_, kf) = knot_covariance(knots, &params.kernel)?;
    eval_h_with_factor(params, &kf)
}

pub fn eval_h_with_factor(params: &ModelParams, k_factor: &SpdFactor) -> Result<f64> {
    let sf = SpdFactor::new(&params.sigma, "variational covariance Sigma")?;
    let m = params.m() as f64;
    let kinv_mu = k_factor.solve_vec(&params.mu);
    let kinv_sigma = k_factor.solve_mat(&params.sigma);
    let value = 0.5 * (params.mu.dot(&kinv_mu) + kinv_sigma.trace() - sf.log_det() + k_factor.log_det() - m);
    finite_or_err(value, "common term h")
}

/// Full objective `Σ_j f_j + h`.
pub fn eval_objective(
    shards: &[WorkerShard],
    knots: &KnotSet,
    params: &ModelParams,
    mode: ResidualMode,
) -> Result<f64> {
    let mut total = 0.0;
    let mut k_factor = None;
    for shard in shards {
        let pieces = build_pieces(shard, knots, params, mode)?;
        total += eval_fj(shard, &pieces, params)?;
        k_factor.get_or_insert_with(|| pieces.k_factor.clone());
    }
    let kf = match k_factor {
        Some(f) => f,
        None => knot_covariance(knots, &params.kernel)?.1,
    };
    Ok(total + eval_h_with_factor(params, &kf)?)
}

/// Log-density of the stacked responses under `N(Xγ, blockdiag(R_j) + BKBᵀ)`,
/// computed densely and independently of [`build_pieces`]. The
/// `−N/2·log 2π` normalizing constant is omitted so that the value equals
/// `−min_{μ,Σ} f` exactly.
pub fn dense_lowrank_loglik(
    shards: &[WorkerShard],
    knots: &KnotSet,
    params: &ModelParams,
    mode: ResidualMode,
) -> Result<f64> {
    let kernel = &params.kernel;
    let n_total: usize = shards.iter().map(|s| s.len()).sum();
    let locs: Vec<Location> = shards.iter().flat_map(|s| s.locs.iter().copied()).collect();
    let k = cov_matrix(knots.locations(), kernel);
    let kf = SpdFactor::new(&k, "dense oracle: knot covariance")?;
    let u = cross_cov(&locs, knots.locations(), kernel);
    let kinv_ut = kf.solve_mat(&u.transpose());
    let mut cov = &u * &kinv_ut;
    let mut offset = 0;
    for shard in shards {
        let n = shard.len();
        let local = cov_matrix(&shard.locs, kernel);
        for i in 0..n {
            for j in 0..n {
                let low = cov[(offset + i, offset + j)];
                let add = match mode {
                    ResidualMode::PredictiveProcess => 0.0,
                    ResidualMode::ModifiedPredictiveProcess => {
                        if i == j {
                            local[(i, i)] - low
                        } else {
                            0.0
                        }
                    }
                    ResidualMode::FullLocal => local[(i, j)] - low,
                };
                cov[(offset + i, offset + j)] += add;
            }
            cov[(offset + i, offset + i)] += params.delta.variance();
        }
        offset += n;
    }
    symmetrize(&mut cov);
    let resid = DVector::from_iterator(
        n_total,
        shards.iter().flat_map(|s| s.residual(&params.gamma).iter().copied().collect::<Vec<_>>()),
    );
    let f = SpdFactor::new(&cov, "dense oracle: low-rank covariance")?;
    let quad = resid.dot(&f.solve_vec(&resid));
    finite_or_err(-0.5 * f.log_det() - 0.5 * quad, "dense low-rank log-likelihood")
}
