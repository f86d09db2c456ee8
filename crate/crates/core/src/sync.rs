//! Synchronous block-coordinate descent: closed-form `(μ, Σ)` and `γ`
//! updates followed by a mod-Hessian Newton step on `θ̃`.
//!
//! The local-quantity, aggregation and update functions here are shared
//! with the asynchronous server, so the two protocols differ only in which
//! quantities are combined and with what weights.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};

use crate::error::{Error, Result};
use crate::kernel::{KernelParams, NoisePrecision, Smoothness};
use crate::linalg::{symmetrize, SpdFactor};
use crate::lowrank::{
    eval_objective, h_grad_hess_thetatilde, knot_covariance, local_theta_derivatives, CrossPartials, KnotSet,
    ModelParams, PiecesCache, ResidualMode, ThetaTilde, WorkerShard,
};
use crate::protocol::StepLabel;

/// Step-size rule `α_t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepSize {
    Constant(f64),
    /// `α_t = initial / (1 + decay·t)`.
    InverseDecay { initial: f64, decay: f64 },
}

impl StepSize {
    pub fn at(&self, t: usize) -> f64 {
        match *self {
            StepSize::Constant(a) => a,
            StepSize::InverseDecay { initial, decay } => initial / (1.0 + decay * t as f64),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (a, ok_extra) = match *self {
            StepSize::Constant(a) => (a, true),
            StepSize::InverseDecay { initial, decay } => (initial, decay.is_finite() && decay >= 0.0),
        };
        if !(a > 0.0 && a <= 1.0) || !ok_extra {
            return Err(Error::Config(format!("step size must lie in (0, 1], got {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyncConfig {
    pub max_iters: usize,
    pub step_size: StepSize,
    /// Eigenvalue floor for the Newton Hessian; `None` uses [`default_mod_threshold`].
    pub mod_threshold: Option<f64>,
    /// Stop once the `θ̃` gradient norm is at or below this value.
    pub grad_tol: f64,
    pub newton_steps_per_iter: usize,
}

impl Default for SyncConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            step_size: StepSize::Constant(1.0),
            mod_threshold: None,
            grad_tol: 1e-6,
            newton_steps_per_iter: 1,
        }
    }
}

impl SyncConfig {
    pub fn validate(&self) -> Result<()> {
        self.step_size.validate()?;
        if let Some(l) = self.mod_threshold {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("mod threshold must be positive, got {l}")));
            }
        }
        if self.newton_steps_per_iter == 0 {
            return Err(Error::Config("newton_steps_per_iter must be at least 1".into()));
        }
        Ok(())
    }
}

/// One recorded sub-step.
#[derive(Clone, Debug, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub substep: StepLabel,
    /// Full objective `Σ_j f_j + h` after the sub-step.
    pub f: f64,
    /// Norm of the most recent aggregated `θ̃` gradient; `NaN` before the first `δθ` step.
    pub grad_norm: f64,
    pub params: ModelParams,
    pub virtual_time: f64,
}

/// A worker's contribution to one sub-step.
#[derive(Clone, Debug, PartialEq)]
pub enum LocalQuantity {
    MuSigma {
        btrb: DMatrix<f64>,
        v: DVector<f64>,
    },
    Gamma {
        xtrx: DMatrix<f64>,
        v: DVector<f64>,
    },
    DeltaTheta {
        grad: Vector3<f64>,
        hess: Matrix3<f64>,
        cross: CrossPartials,
    },
}

impl LocalQuantity {
    pub fn step(&self) -> StepLabel {
        match self {
            LocalQuantity::MuSigma { .. } => StepLabel::MuSigma,
            LocalQuantity::Gamma { .. } => StepLabel::Gamma,
            LocalQuantity::DeltaTheta { .. } => StepLabel::DeltaTheta,
        }
    }
}

/// Computes `L_j(φ)` for the given sub-step.
pub fn compute_local(
    step: StepLabel,
    shard: &WorkerShard,
    knots: &KnotSet,
    params: &ModelParams,
    mode: ResidualMode,
    cache: &mut PiecesCache,
) -> Result<LocalQuantity> {
    Ok(match step {
        StepLabel::MuSigma => {
            let (btrb, v) = cache.get(shard, knots, params, mode)?.mu_sigma_sums(shard, &params.gamma);
            LocalQuantity::MuSigma { btrb, v }
        }
        StepLabel::Gamma => {
            let (xtrx, v) = cache.get(shard, knots, params, mode)?.gamma_sums(shard, &params.mu);
            LocalQuantity::Gamma { xtrx, v }
        }
        StepLabel::DeltaTheta => {
            let d = local_theta_derivatives(shard, knots, params, mode)?;
            LocalQuantity::DeltaTheta {
                grad: d.grad,
                hess: d.hess,
                cross: d.cross,
            }
        }
    })
}

/// `Σ_j w_j q_j`, componentwise, accumulated in the given order.
pub fn weighted_sum(items: &[(f64, &LocalQuantity)]) -> Result<LocalQuantity> {
    let (w0, first) = items
        .first()
        .ok_or_else(|| Error::Protocol("cannot aggregate zero quantities".into()))?;
    let mut acc = scale(first, *w0);
    for (w, q) in &items[1..] {
        match (&mut acc, q) {
            (LocalQuantity::MuSigma { btrb, v }, LocalQuantity::MuSigma { btrb: b2, v: v2 }) => {
                *btrb += b2 * *w;
                *v += v2 * *w;
            }
            (LocalQuantity::Gamma { xtrx, v }, LocalQuantity::Gamma { xtrx: x2, v: v2 }) => {
                *xtrx += x2 * *w;
                *v += v2 * *w;
            }
            (
                LocalQuantity::DeltaTheta { grad, hess, cross },
                LocalQuantity::DeltaTheta {
                    grad: g2,
                    hess: h2,
                    cross: c2,
                },
            ) => {
                *grad += g2 * *w;
                *hess += h2 * *w;
                cross.mu += &c2.mu * *w;
                for a in 0..3 {
                    cross.sigma[a] += &c2.sigma[a] * *w;
                }
            }
            _ => return Err(Error::Protocol("aggregating quantities of different sub-steps".into())),
        }
    }
    Ok(acc)
}

fn scale(q: &LocalQuantity, w: f64) -> LocalQuantity {
    match q {
        LocalQuantity::MuSigma { btrb, v } => LocalQuantity::MuSigma {
            btrb: btrb * w,
            v: v * w,
        },
        LocalQuantity::Gamma { xtrx, v } => LocalQuantity::Gamma { xtrx: xtrx * w, v: v * w },
        LocalQuantity::DeltaTheta { grad, hess, cross } => LocalQuantity::DeltaTheta {
            grad: grad * w,
            hess: hess * w,
            cross: CrossPartials {
                mu: &cross.mu * w,
                sigma: std::array::from_fn(|a| &cross.sigma[a] * w),
            },
        },
    }
}

/// Minimizer of `f` over `(μ, Σ)` given the worker totals
/// `S = Σ_j BᵀR⁻¹B` and `v = Σ_j BᵀR⁻¹(z − Xγ)`:
/// `Σ = (S + K⁻¹)⁻¹`, `μ = Σ v`. Evaluated as `Σ = L(LᵀSL + I)⁻¹Lᵀ` with `K = LLᵀ`.
pub fn update_mu_sigma(
    s_total: &DMatrix<f64>,
    v_total: &DVector<f64>,
    k_factor: &SpdFactor,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let m = k_factor.dim();
    let l = k_factor.l();
    let mut inner = l.transpose() * s_total * &l;
    symmetrize(&mut inner);
    for i in 0..m {
        inner[(i, i)] += 1.0;
    }
    let f = SpdFactor::new(&inner, "variational precision I + LᵀSL")?;
    let mut sigma = &l * f.solve_mat(&l.transpose());
    symmetrize(&mut sigma);
    let mu = &sigma * v_total;
    Ok((mu, sigma))
}

/// Generalized least squares `γ = G⁻¹ r`.
pub fn gls_gamma(gram: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let p = gram.nrows();
    if let Some(chol) = nalgebra::Cholesky::new(gram.clone()) {
        let gamma = chol.solve(rhs);
        if gamma.iter().all(|v| v.is_finite()) {
            return Ok(gamma);
        }
    }
    let deficient = (1..=p)
        .find(|&k| nalgebra::Cholesky::new(gram.view((0, 0), (k, k)).into_owned()).is_none())
        .unwrap_or(p)
        - 1;
    Err(Error::numerical(
        "gamma update",
        format!("covariate Gram matrix is singular at column {deficient}"),
    ))
}

/// Default eigenvalue floor: `max(1e-3·tr(H)/3, 1e-6)`.
pub fn default_mod_threshold(h: &Matrix3<f64>) -> f64 {
    (1e-3 * h.trace() / 3.0).max(1e-6)
}

/// Replaces each eigenvalue `λ` of `H` by `max(|λ|, λ̲)`.
pub fn mod_hessian(h: &Matrix3<f64>, floor: f64) -> Matrix3<f64> {
    let sym = (h + h.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|l| l.abs().max(floor));
    let q = eig.eigenvectors;
    let out = q * Matrix3::from_diagonal(&vals) * q.transpose();
    (out + out.transpose()) * 0.5
}

/// `θ̃ − α H⁻¹ g`, projected onto `[1e-8, 1e8]³`.
pub fn newton_step(theta: ThetaTilde, g: &Vector3<f64>, h: &Matrix3<f64>, alpha: f64) -> ThetaTilde {
    let dir = h
        .cholesky()
        .map(|c| c.solve(g))
        .or_else(|| h.try_inverse().map(|inv| inv * g))
        .unwrap_or_else(|| *g);
    ThetaTilde::projected(theta.to_vector() - dir * alpha)
}

/// Largest fraction by which one Newton update may move any `θ̃` component.
pub const MAX_RELATIVE_CHANGE: f64 = 0.5;

/// Shrinks the move from `from` to `to` uniformly so that no component
/// changes by more than `kappa` times its current value.
pub fn limit_relative_change(from: ThetaTilde, to: ThetaTilde, kappa: f64) -> ThetaTilde {
    let d = to.to_vector() - from.to_vector();
    let mut s: f64 = 1.0;
    for i in 0..3 {
        if d[i] != 0.0 {
            s = s.min(kappa * from.0[i] / d[i].abs());
        }
    }
    if s >= 1.0 {
        to
    } else {
        ThetaTilde::projected(from.to_vector() + d * s)
    }
}

/// Applies the update of `step` from an aggregated quantity. Aggregates are
/// weighted averages over `n_workers`, so `(μ, Σ)` and `θ̃` use `n_workers`
/// times the average to recover the worker totals. Returns the new
/// parameters and, for `δθ`, the norm of the full `θ̃` gradient used.
pub fn apply_update(
    step: StepLabel,
    current: &ModelParams,
    aggregate: &LocalQuantity,
    n_workers: usize,
    knots: &KnotSet,
    alpha: f64,
    mod_threshold: Option<f64>,
) -> Result<(ModelParams, Option<f64>)> {
    let j = n_workers as f64;
    let mut next = current.clone();
    match (step, aggregate) {
        (StepLabel::MuSigma, LocalQuantity::MuSigma { btrb, v }) => {
            let (_, kf) = knot_covariance(knots, &current.kernel)?;
            let (mu, sigma) = update_mu_sigma(&(btrb * j), &(v * j), &kf)?;
            next.mu = mu;
            next.sigma = sigma;
            Ok((next, None))
        }
        (StepLabel::Gamma, LocalQuantity::Gamma { xtrx, v }) => {
            next.gamma = gls_gamma(xtrx, v)?;
            Ok((next, None))
        }
        (StepLabel::DeltaTheta, LocalQuantity::DeltaTheta { grad, hess, .. }) => {
            let (hg, hh) = h_grad_hess_thetatilde(current, knots)?;
            let g = grad * j + hg;
            let h = hess * j + hh;
            if !(g.iter().all(|v| v.is_finite()) && h.iter().all(|v| v.is_finite())) {
                return Err(Error::numerical("theta update", "non-finite aggregated derivatives"));
            }
            let floor = mod_threshold.unwrap_or_else(|| default_mod_threshold(&h));
            let theta = newton_step(current.theta_tilde(), &g, &mod_hessian(&h, floor), alpha);
            let theta = limit_relative_change(current.theta_tilde(), theta, MAX_RELATIVE_CHANGE);
            next.set_theta_tilde(theta)?;
            Ok((next, Some(g.norm())))
        }
        _ => Err(Error::Protocol(format!("aggregate does not match sub-step {step}"))),
    }
}

/// Starting point: averaged per-worker OLS for `γ`, moment-based `δ` and
/// `σ²`, `β = 0.3·diameter`, `μ = 0`, `Σ = K`.
pub fn initial_params(shards: &[WorkerShard], knots: &KnotSet, nu: Smoothness) -> Result<ModelParams> {
    let first = shards.first().ok_or_else(|| Error::Input("no workers".into()))?;
    let p = first.n_covariates();
    let mut gamma = DVector::zeros(p);
    for s in shards {
        if s.n_covariates() != p {
            return Err(Error::Input("workers disagree on the number of covariates".into()));
        }
        let gram = s.x.transpose() * &s.x;
        let g = gls_gamma(&gram, &(s.x.transpose() * &s.z))
            .map_err(|e| Error::Input(format!("worker {}: OLS initialization failed: {e}", s.id)))?;
        gamma += g;
    }
    gamma /= shards.len() as f64;
    let resid: Vec<f64> = shards.iter().flat_map(|s| s.residual(&gamma).iter().copied().collect::<Vec<_>>()).collect();
    let n = resid.len() as f64;
    let mean = resid.iter().sum::<f64>() / n;
    let var = resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    if !(var > 0.0 && var.is_finite()) {
        return Err(Error::Input("residual variance at initialization is not positive".into()));
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for loc in shards.iter().flat_map(|s| s.locs.iter()).chain(knots.locations()) {
        for d in 0..2 {
            lo[d] = lo[d].min(loc.0[d]);
            hi[d] = hi[d].max(loc.0[d]);
        }
    }
    let diameter = ((hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2)).sqrt().max(1e-6);
    let kernel = KernelParams::new(nu, var / 2.0, 0.3 * diameter)?;
    let (k, _) = knot_covariance(knots, &kernel)?;
    Ok(ModelParams {
        mu: DVector::zeros(knots.len()),
        sigma: k,
        gamma,
        delta: NoisePrecision::new(1.0 / var)?,
        kernel,
    })
}

/// Outcome of [`run_sync`]; on numerical failure the partial trace is kept.
#[derive(Clone, Debug)]
pub struct SyncRun {
    pub trace: Vec<IterRecord>,
    pub params: ModelParams,
    pub converged: bool,
    pub failure: Option<Error>,
}

/// Runs the synchronous loop. `step_time` reports the virtual duration of
/// each sub-step; pass `None` to leave virtual time at zero.
pub fn run_sync(
    shards: &[WorkerShard],
    knots: &KnotSet,
    mode: ResidualMode,
    cfg: &SyncConfig,
    init: &ModelParams,
    mut step_time: Option<&mut dyn FnMut(StepLabel) -> f64>,
) -> Result<SyncRun> {
    cfg.validate()?;
    init.validate()?;
    let mut caches = vec![PiecesCache::new(); shards.len()];
    let mut params = init.clone();
    let mut trace = Vec::new();
    let mut clock = 0.0;
    let mut grad_norm = f64::NAN;
    let uniform = 1.0 / shards.len() as f64;
    let mut steps = vec![StepLabel::MuSigma, StepLabel::Gamma];
    steps.extend(std::iter::repeat_n(StepLabel::DeltaTheta, cfg.newton_steps_per_iter));

    for iter in 0..cfg.max_iters {
        for &step in &steps {
            let outcome = sync_substep(step, shards, knots, mode, &params, &mut caches, uniform, cfg, iter);
            let (next, g) = match outcome {
                Ok(v) => v,
                Err(e) if e.is_numerical() => {
                    return Ok(SyncRun {
                        trace,
                        params,
                        converged: false,
                        failure: Some(e),
                    })
                }
                Err(e) => return Err(e),
            };
            params = next;
            if let Some(g) = g {
                grad_norm = g;
            }
            if let Some(timer) = step_time.as_mut() {
                clock += timer(step);
            }
            let f = match eval_objective(shards, knots, &params, mode) {
                Ok(f) => f,
                Err(e) => {
                    return Ok(SyncRun {
                        trace,
                        params,
                        converged: false,
                        failure: Some(e),
                    })
                }
            };
            trace.push(IterRecord {
                iter,
                substep: step,
                f,
                grad_norm,
                params: params.clone(),
                virtual_time: clock,
            });
        }
        if grad_norm <= cfg.grad_tol {
            return Ok(SyncRun {
                trace,
                params,
                converged: true,
                failure: None,
            });
        }
    }
    Ok(SyncRun {
        trace,
        params,
        converged: false,
        failure: None,
    })
}

#[allow(clippy::too_many_arguments)]
fn sync_substep(
    step: StepLabel,
    shards: &[WorkerShard],
    knots: &KnotSet,
    mode: ResidualMode,
    params: &ModelParams,
    caches: &mut [PiecesCache],
    weight: f64,
    cfg: &SyncConfig,
    iter: usize,
) -> Result<(ModelParams, Option<f64>)> {
    let locals = shards
        .iter()
        .zip(caches.iter_mut())
        .map(|(s, c)| compute_local(step, s, knots, params, mode, c))
        .collect::<Result<Vec<_>>>()?;
    let items: Vec<(f64, &LocalQuantity)> = locals.iter().map(|q| (weight, q)).collect();
    let agg = weighted_sum(&items)?;
    apply_update(step, params, &agg, shards.len(), knots, cfg.step_size.at(iter), cfg.mod_threshold)
}
