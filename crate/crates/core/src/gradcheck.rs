//! Finite-difference validation of the analytic derivatives.
//!
//! Central differences with a relative step of `1e-5` are compared against
//! the analytic results; errors are reported relative to the largest
//! finite-difference entry of each derivative object.

use nalgebra::{DMatrix, Matrix3, Vector3};

use crate::baselines::indep_worker_loglik_and_derivs;
use crate::error::Result;
use crate::lowrank::{
    build_pieces, eval_fj, eval_h, h_grad_hess_thetatilde, local_theta_derivatives, KnotSet, ModelParams,
    ResidualMode, ThetaTilde, WorkerShard,
};

pub const RELATIVE_STEP: f64 = 1e-5;

/// Maximum relative errors for one instance or a whole suite.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheck {
    pub first_order: f64,
    pub second_order: f64,
}

impl GradCheck {
    pub fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck {
            first_order: self.first_order.max(other.first_order),
            second_order: self.second_order.max(other.second_order),
        }
    }
}

/// `max |a − b| / max |b|`, with `b` the reference.
pub fn relative_error(analytic: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(analytic.len(), reference.len());
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = analytic
        .iter()
        .zip(reference)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn step_for(x: f64) -> f64 {
    RELATIVE_STEP * x.abs().max(1e-3)
}

fn shifted(params: &ModelParams, a: usize, h: f64) -> Result<ModelParams> {
    let mut t = params.theta_tilde();
    t.0[a] += h;
    params.with_theta_tilde(ThetaTilde(t.0))
}

/// Central differences in `θ̃` of a scalar and of a 3-vector valued function.
fn fd_theta<F, G>(params: &ModelParams, value: F, grad: G) -> Result<(Vector3<f64>, Matrix3<f64>)>
where
    F: Fn(&ModelParams) -> Result<f64>,
    G: Fn(&ModelParams) -> Result<Vector3<f64>>,
{
    let t = params.theta_tilde();
    let mut g = Vector3::zeros();
    let mut h = Matrix3::zeros();
    for a in 0..3 {
        let step = step_for(t.0[a]);
        let plus = shifted(params, a, step)?;
        let minus = shifted(params, a, -step)?;
        g[a] = (value(&plus)? - value(&minus)?) / (2.0 * step);
        let col = (grad(&plus)? - grad(&minus)?) / (2.0 * step);
        h.set_column(a, &col);
    }
    Ok((g, h))
}

/// Checks gradient, Hessian and cross partials of `f_j`.
pub fn check_fj(shard: &WorkerShard, knots: &KnotSet, params: &ModelParams, mode: ResidualMode) -> Result<GradCheck> {
    let analytic = local_theta_derivatives(shard, knots, params, mode)?;
    let value = |p: &ModelParams| eval_fj(shard, &build_pieces(shard, knots, p, mode)?, p);
    let grad = |p: &ModelParams| Ok(local_theta_derivatives(shard, knots, p, mode)?.grad);
    let (g_fd, h_fd) = fd_theta(params, value, grad)?;
    let first = relative_error(analytic.grad.as_slice(), g_fd.as_slice());
    let mut second = relative_error(analytic.hess.as_slice(), h_fd.as_slice());

    let m = params.m();
    let mut mu_fd = DMatrix::zeros(3, m);
    for k in 0..m {
        let step = step_for(params.mu[k]);
        let mut plus = params.clone();
        plus.mu[k] += step;
        let mut minus = params.clone();
        minus.mu[k] -= step;
        let col = (grad(&plus)? - grad(&minus)?) / (2.0 * step);
        mu_fd.set_column(k, &col);
    }
    second = second.max(relative_error(analytic.cross.mu.as_slice(), mu_fd.as_slice()));

    // Σ is symmetric, so off-diagonal pairs move together and the matching
    // analytic value is the sum of both mirrored entries.
    let mut sigma_fd: [DMatrix<f64>; 3] = std::array::from_fn(|_| DMatrix::zeros(m, m));
    let mut sigma_an: [DMatrix<f64>; 3] = std::array::from_fn(|_| DMatrix::zeros(m, m));
    for k in 0..m {
        for l in k..m {
            let step = step_for(params.sigma[(k, l)]);
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus.sigma[(k, l)] += step;
            minus.sigma[(k, l)] -= step;
            if k != l {
                plus.sigma[(l, k)] += step;
                minus.sigma[(l, k)] -= step;
            }
            let col = (grad(&plus)? - grad(&minus)?) / (2.0 * step);
            for a in 0..3 {
                let c = &analytic.cross.sigma[a];
                sigma_fd[a][(k, l)] = col[a];
                sigma_an[a][(k, l)] = if k == l { c[(k, k)] } else { c[(k, l)] + c[(l, k)] };
            }
        }
    }
    for a in 0..3 {
        second = second.max(relative_error(sigma_an[a].as_slice(), sigma_fd[a].as_slice()));
    }
    Ok(GradCheck {
        first_order: first,
        second_order: second,
    })
}

/// Checks gradient and Hessian of `h`.
pub fn check_h(knots: &KnotSet, params: &ModelParams) -> Result<GradCheck> {
    let (g, h) = h_grad_hess_thetatilde(params, knots)?;
    let value = |p: &ModelParams| eval_h(p, knots);
    let grad = |p: &ModelParams| Ok(h_grad_hess_thetatilde(p, knots)?.0);
    let (g_fd, h_fd) = fd_theta(params, value, grad)?;
    Ok(GradCheck {
        first_order: relative_error(g.as_slice(), g_fd.as_slice()),
        second_order: relative_error(h.as_slice(), h_fd.as_slice()),
    })
}

/// Checks gradient and Hessian of one worker's independence log-likelihood.
pub fn check_independence(shard: &WorkerShard, params: &ModelParams) -> Result<GradCheck> {
    let (_, g, h) = indep_worker_loglik_and_derivs(shard, params)?;
    let value = |p: &ModelParams| Ok(indep_worker_loglik_and_derivs(shard, p)?.0);
    let grad = |p: &ModelParams| Ok(indep_worker_loglik_and_derivs(shard, p)?.1);
    let (g_fd, h_fd) = fd_theta(params, value, grad)?;
    Ok(GradCheck {
        first_order: relative_error(g.as_slice(), g_fd.as_slice()),
        second_order: relative_error(h.as_slice(), h_fd.as_slice()),
    })
}

/// Runs every check on every worker of an instance, in all residual modes.
pub fn check_instance(shards: &[WorkerShard], knots: &KnotSet, params: &ModelParams) -> Result<GradCheck> {
    let mut out = check_h(knots, params)?;
    for shard in shards {
        for mode in ResidualMode::ALL {
            out = out.merge(check_fj(shard, knots, params, mode)?);
        }
        out = out.merge(check_independence(shard, params)?);
    }
    Ok(out)
}
