//! Reference estimators and diagnostics: the independent-blocks model,
//! KL comparisons of the latent covariance structures, the determinant
//! inequality behind them, and point prediction.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::kernel::{cov_matrix, cross_cov, cross_cov_beta_derivs, KernelParams, Location};
use crate::linalg::{symmetrize, SpdFactor};
use crate::lowrank::{DerivMat, GaussianTerm, KnotSet, ModelParams, ThetaTilde, WorkerShard};
use crate::sync::{gls_gamma, mod_hessian, newton_step, default_mod_threshold};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Log-likelihood of one worker under the independent-blocks model, with
/// its gradient and Hessian in `θ̃ = (δ, σ², β)`.
pub fn indep_worker_loglik_and_derivs(
    shard: &WorkerShard,
    params: &ModelParams,
) -> Result<(f64, Vector3<f64>, Matrix3<f64>)> {
    let kp = &params.kernel;
    let noise = params.delta.variance();
    let n = shard.len();
    let cd = cross_cov_beta_derivs(&shard.locs, &shard.locs, kp);
    let mut r = cd.value.clone();
    for i in 0..n {
        r[(i, i)] += noise;
    }
    let factor = SpdFactor::new(&r, &format!("independence covariance (worker {})", shard.id))?;
    let resid = shard.residual(&params.gamma);
    let a_r = factor.solve_vec(&resid);
    let neg = 0.5 * n as f64 * LN_2PI + 0.5 * factor.log_det() + 0.5 * resid.dot(&a_r);
    if !neg.is_finite() {
        return Err(Error::numerical("independence log-likelihood", "non-finite value"));
    }
    let sigma2 = kp.sigma2;
    let mut d2_cov: [[DerivMat; 3]; 3] = std::array::from_fn(|_| std::array::from_fn(|_| DerivMat::Zero));
    d2_cov[0][0] = DerivMat::Scaled(2.0 * noise * noise * noise);
    d2_cov[1][2] = DerivMat::Dense(&cd.d_beta / sigma2);
    d2_cov[2][1] = DerivMat::Dense(&cd.d_beta / sigma2);
    d2_cov[2][2] = DerivMat::Dense(cd.d2_beta);
    let term = GaussianTerm {
        inv: factor.inverse(),
        p: &a_r * a_r.transpose(),
        d_cov: [
            DerivMat::Scaled(-noise * noise),
            DerivMat::Dense(&cd.value / sigma2),
            DerivMat::Dense(cd.d_beta),
        ],
        d2_cov,
        a_dq: [None, None, None],
        tr_a_dq: [0.0; 3],
        tr_a_d2q: [[0.0; 3]; 3],
    };
    let (g, h) = term.grad_hess();
    Ok((-neg, -g, -h))
}

/// `ℓ^ind = Σ_j ℓ_j` with its `θ̃` gradient and Hessian.
pub fn indep_loglik_and_derivs(
    shards: &[WorkerShard],
    params: &ModelParams,
) -> Result<(f64, Vector3<f64>, Matrix3<f64>)> {
    let mut total = (0.0, Vector3::zeros(), Matrix3::zeros());
    for shard in shards {
        let (l, g, h) = indep_worker_loglik_and_derivs(shard, params)?;
        total.0 += l;
        total.1 += g;
        total.2 += h;
    }
    Ok(total)
}

/// Residual covariances `C_jj + δ⁻¹I` of the independence model.
fn indep_covariances(shards: &[WorkerShard], params: &ModelParams) -> Result<Vec<SpdFactor>> {
    shards
        .iter()
        .map(|s| {
            let mut r = cov_matrix(&s.locs, &params.kernel);
            for i in 0..s.len() {
                r[(i, i)] += params.delta.variance();
            }
            SpdFactor::new(&r, &format!("independence covariance (worker {})", s.id))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IndepFitOptions {
    pub max_iters: usize,
    pub grad_tol: f64,
    /// Halvings tried before a step is declared unproductive.
    pub max_backtracks: usize,
}

impl Default for IndepFitOptions {
    fn default() -> Self {
        Self {
            max_iters: 200,
            grad_tol: 1e-6,
            max_backtracks: 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndepIter {
    pub iter: usize,
    pub neg_loglik: f64,
    pub grad_norm: f64,
    pub theta: ThetaTilde,
}

#[derive(Clone, Debug)]
pub struct IndepFit {
    pub params: ModelParams,
    pub trace: Vec<IndepIter>,
    pub converged: bool,
    /// Set when no backtracked Newton step decreased `−ℓ^ind`.
    pub stalled: bool,
}

/// Maximizes `ℓ^ind` by alternating a GLS step for `γ` with a backtracked
/// mod-Hessian Newton step on `θ̃`.
pub fn fit_independence(shards: &[WorkerShard], init: &ModelParams, opts: IndepFitOptions) -> Result<IndepFit> {
    let mut params = init.clone();
    let mut trace = Vec::new();
    let mut stalled = false;
    let mut converged = false;
    for iter in 0..opts.max_iters {
        let factors = indep_covariances(shards, &params)?;
        let mut gram = DMatrix::zeros(params.p(), params.p());
        let mut rhs = DVector::zeros(params.p());
        for (s, f) in shards.iter().zip(&factors) {
            let ax = f.solve_mat(&s.x);
            gram += s.x.transpose() * &ax;
            rhs += ax.transpose() * &s.z;
        }
        params.gamma = gls_gamma(&gram, &rhs)?;

        let (l, g, h) = indep_loglik_and_derivs(shards, &params)?;
        let grad_norm = g.norm();
        trace.push(IndepIter {
            iter,
            neg_loglik: -l,
            grad_norm,
            theta: params.theta_tilde(),
        });
        if grad_norm <= opts.grad_tol {
            converged = true;
            break;
        }
        let neg_h = -h;
        let modified = mod_hessian(&neg_h, default_mod_threshold(&neg_h));
        let theta = params.theta_tilde();
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_backtracks {
            let cand = params.with_theta_tilde(newton_step(theta, &(-g), &modified, alpha))?;
            if let Ok((lc, _, _)) = indep_loglik_and_derivs(shards, &cand) {
                if lc > l {
                    accepted = Some(cand);
                    break;
                }
            }
            alpha *= 0.5;
        }
        match accepted {
            Some(p) => params = p,
            None => {
                stalled = true;
                break;
            }
        }
    }
    Ok(IndepFit {
        params,
        trace,
        converged,
        stalled,
    })
}

/// Per-observation KL divergences of the two approximate latent covariances
/// from the exact one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlReport {
    pub kl_lowrank: f64,
    pub kl_indep: f64,
    pub m_over_n: f64,
}

impl KlReport {
    /// `kl_lowrank ≤ kl_indep + m/N + slack`.
    pub fn bound_holds(&self, slack: f64) -> bool {
        self.kl_lowrank <= self.kl_indep + self.m_over_n + slack
    }
}

/// `KL(N(0, C) ‖ N(0, C_approx))`.
pub fn gaussian_kl(c: &DMatrix<f64>, c_approx: &DMatrix<f64>) -> Result<f64> {
    let n = c.nrows() as f64;
    let fc = SpdFactor::new(c, "exact latent covariance")?;
    let fa = SpdFactor::new(c_approx, "approximate latent covariance")?;
    let tr = fa.solve_mat(c).trace();
    Ok(0.5 * (tr - n + fa.log_det() - fc.log_det()))
}

/// Exact, low-rank-plus-local and block-diagonal latent covariances of the
/// stacked locations.
pub fn latent_covariances(
    shards: &[WorkerShard],
    knots: &KnotSet,
    kernel: &KernelParams,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let locs: Vec<Location> = shards.iter().flat_map(|s| s.locs.iter().copied()).collect();
    let c = cov_matrix(&locs, kernel);
    let k = cov_matrix(knots.locations(), kernel);
    let kf = SpdFactor::new(&k, "knot covariance K")?;
    let u = cross_cov(&locs, knots.locations(), kernel);
    let mut c1 = &u * kf.solve_mat(&u.transpose());
    let mut c2 = DMatrix::zeros(locs.len(), locs.len());
    let mut offset = 0;
    for s in shards {
        let n = s.len();
        let block = c.view((offset, offset), (n, n)).into_owned();
        c1.view_mut((offset, offset), (n, n)).copy_from(&block);
        c2.view_mut((offset, offset), (n, n)).copy_from(&block);
        offset += n;
    }
    symmetrize(&mut c1);
    Ok((c, c1, c2))
}

pub fn kl_report(shards: &[WorkerShard], knots: &KnotSet, kernel: &KernelParams) -> Result<KlReport> {
    let (c, c1, c2) = latent_covariances(shards, knots, kernel)?;
    let n = c.nrows() as f64;
    Ok(KlReport {
        kl_lowrank: gaussian_kl(&c, &c1)? / n,
        kl_indep: gaussian_kl(&c, &c2)? / n,
        m_over_n: knots.len() as f64 / n,
    })
}

/// Checks `det(I + Σ X_j) ≤ Π det(I + X_j)` for PSD `X_j`, with relative slack `1e-10`.
pub fn det_inequality_check(xs: &[DMatrix<f64>]) -> bool {
    let Some(first) = xs.first() else {
        return true;
    };
    let n = first.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut sum = eye.clone();
    let mut rhs = 0.0;
    for x in xs {
        sum += x;
        rhs += (&eye + x).determinant().ln();
    }
    let lhs = sum.determinant().ln();
    lhs <= rhs + 1e-10 * rhs.abs().max(1.0)
}

/// Posterior-mean prediction `x₀ᵀγ + C(s₀, S*) K⁻¹ μ`.
pub fn predict(locs: &[Location], x: &DMatrix<f64>, params: &ModelParams, knots: &KnotSet) -> Result<DVector<f64>> {
    if x.nrows() != locs.len() || x.ncols() != params.p() {
        return Err(Error::Input(format!(
            "prediction covariates must be {}x{}",
            locs.len(),
            params.p()
        )));
    }
    let k = cov_matrix(knots.locations(), &params.kernel);
    let kf = SpdFactor::new(&k, "knot covariance K")?;
    let u = cross_cov(locs, knots.locations(), &params.kernel);
    Ok(x * &params.gamma + u * kf.solve_vec(&params.mu))
}

pub fn rmse(pred: &DVector<f64>, truth: &DVector<f64>) -> f64 {
    ((pred - truth).norm_squared() / pred.len() as f64).sqrt()
}
