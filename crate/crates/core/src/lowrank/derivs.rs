//! Analytic first and second derivatives in `θ̃ = (δ, σ², β)`.
//!
//! Every objective term here has the shape `½ log det R + ½ tr(R⁻¹Q)` with
//! `R` and `Q` depending on `θ̃`. [`GaussianTerm`] turns the derivative
//! matrices of `R` and the needed traces of `Q` into a gradient and Hessian.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use super::{KnotSet, ModelParams, ResidualCov, ResidualMode, WorkerShard};
use crate::error::Result;
use crate::kernel::cross_cov_beta_derivs;
use crate::linalg::{frobenius_dot, symmetrize, trace_of_product, SpdFactor};

const DELTA: usize = 0;
const SIGMA2: usize = 1;
const BETA: usize = 2;

/// A derivative of a symmetric matrix, kept in the cheapest exact form.
#[derive(Clone, Debug)]
pub(crate) enum DerivMat {
    Zero,
    Scaled(f64),
    Diag(DVector<f64>),
    Dense(DMatrix<f64>),
}

impl DerivMat {
    /// `tr(M · self)` for symmetric `M`.
    fn trace_with(&self, m: &DMatrix<f64>) -> f64 {
        match self {
            DerivMat::Zero => 0.0,
            DerivMat::Scaled(s) => s * m.trace(),
            DerivMat::Diag(d) => d.iter().enumerate().map(|(i, v)| v * m[(i, i)]).sum(),
            DerivMat::Dense(x) => frobenius_dot(m, x),
        }
    }

    /// `M · self`, or `None` when the derivative vanishes.
    fn right_mul(&self, m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        match self {
            DerivMat::Zero => None,
            DerivMat::Scaled(s) => Some(m * *s),
            DerivMat::Diag(d) => {
                let mut out = m.clone();
                for (j, mut col) in out.column_iter_mut().enumerate() {
                    col *= d[j];
                }
                Some(out)
            }
            DerivMat::Dense(x) => Some(m * x),
        }
    }

    /// `self · M`, with zero for a vanishing derivative.
    fn left_mul(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            DerivMat::Zero => DMatrix::zeros(m.nrows(), m.ncols()),
            DerivMat::Scaled(s) => m * *s,
            DerivMat::Diag(d) => {
                let mut out = m.clone();
                for (i, mut row) in out.row_iter_mut().enumerate() {
                    row *= d[i];
                }
                out
            }
            DerivMat::Dense(x) => x * m,
        }
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            DerivMat::Zero => DVector::zeros(v.len()),
            DerivMat::Scaled(s) => v * *s,
            DerivMat::Diag(d) => v.component_mul(d),
            DerivMat::Dense(x) => x * v,
        }
    }
}

/// Derivative data for `½ log det R + ½ tr(R⁻¹Q)`.
pub(crate) struct GaussianTerm {
    /// `A = R⁻¹`.
    pub inv: DMatrix<f64>,
    /// `P = A Q A`.
    pub p: DMatrix<f64>,
    pub d_cov: [DerivMat; 3],
    pub d2_cov: [[DerivMat; 3]; 3],
    /// `A ∂_a Q`, absent where `Q` does not depend on coordinate `a`.
    pub a_dq: [Option<DMatrix<f64>>; 3],
    /// `tr(A ∂_a Q)`.
    pub tr_a_dq: [f64; 3],
    /// `tr(A ∂_a ∂_b Q)`.
    pub tr_a_d2q: [[f64; 3]; 3],
}

impl GaussianTerm {
    pub fn grad_hess(&self) -> (Vector3<f64>, Matrix3<f64>) {
        let g = &self.inv - &self.p;
        let y: Vec<Option<DMatrix<f64>>> = self.d_cov.iter().map(|d| d.right_mul(&self.inv)).collect();
        let v: Vec<Option<DMatrix<f64>>> = self.d_cov.iter().map(|d| d.right_mul(&self.p)).collect();
        let mut grad = Vector3::zeros();
        let mut hess = Matrix3::zeros();
        for a in 0..3 {
            grad[a] = 0.5 * self.d_cov[a].trace_with(&g) + 0.5 * self.tr_a_dq[a];
            for b in a..3 {
                let mut h = 0.5 * self.d2_cov[a][b].trace_with(&g) + 0.5 * self.tr_a_d2q[a][b];
                if let (Some(ya), Some(yb)) = (&y[a], &y[b]) {
                    h -= 0.5 * trace_of_product(ya, yb);
                }
                if let (Some(ya), Some(vb)) = (&y[a], &v[b]) {
                    h += trace_of_product(ya, vb);
                }
                if let (Some(za), Some(yb)) = (&self.a_dq[a], &y[b]) {
                    h -= 0.5 * trace_of_product(za, yb);
                }
                if let (Some(zb), Some(ya)) = (&self.a_dq[b], &y[a]) {
                    h -= 0.5 * trace_of_product(zb, ya);
                }
                hess[(a, b)] = h;
                hess[(b, a)] = h;
            }
        }
        (grad, hess)
    }
}

fn zero_grid() -> [[DerivMat; 3]; 3] {
    std::array::from_fn(|_| std::array::from_fn(|_| DerivMat::Zero))
}

/// Mixed partials of `f_j` between `θ̃` and the variational parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossPartials {
    /// Row `a` holds `∂²f_j / ∂θ̃_a ∂μ`.
    pub mu: DMatrix<f64>,
    /// Entry `a` holds `∂²f_j / ∂θ̃_a ∂Σ` as a symmetric `m × m` matrix.
    pub sigma: [DMatrix<f64>; 3],
}

/// Value, gradient, Hessian and cross partials of `f_j` at one point.
#[derive(Clone, Debug)]
pub struct ThetaDerivatives {
    pub value: f64,
    pub grad: Vector3<f64>,
    pub hess: Matrix3<f64>,
    pub cross: CrossPartials,
}

/// Row-wise dot products `diag(X Yᵀ)`.
fn row_dots(x: &DMatrix<f64>, y: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(x.nrows(), |i, _| x.row(i).dot(&y.row(i)))
}

/// `X K⁻¹` for symmetric `K`.
fn right_solve(kf: &SpdFactor, x: &DMatrix<f64>) -> DMatrix<f64> {
    kf.solve_mat(&x.transpose()).transpose()
}

/// Everything the δθ sub-step needs from one worker, sharing all intermediates.
pub fn local_theta_derivatives(
    shard: &WorkerShard,
    knots: &KnotSet,
    params: &ModelParams,
    mode: ResidualMode,
) -> Result<ThetaDerivatives> {
    let kp = &params.kernel;
    let sigma2 = kp.sigma2;
    let delta = params.delta.get();
    let noise = 1.0 / delta;
    let n = shard.len();

    let kd = cross_cov_beta_derivs(knots.locations(), knots.locations(), kp);
    let kf = SpdFactor::new(&kd.value, "knot covariance K")?;
    let ud = cross_cov_beta_derivs(&shard.locs, knots.locations(), kp);
    let b = right_solve(&kf, &ud.value);
    let b_b = right_solve(&kf, &(&ud.d_beta - &b * &kd.d_beta));
    let b_bb = right_solve(&kf, &(&ud.d2_beta - &b_b * &kd.d_beta * 2.0 - &b * &kd.d2_beta));

    let mut d_cov: [DerivMat; 3] = std::array::from_fn(|_| DerivMat::Zero);
    let mut d2_cov = zero_grid();
    d_cov[DELTA] = DerivMat::Scaled(-noise * noise);
    d2_cov[DELTA][DELTA] = DerivMat::Scaled(2.0 * noise * noise * noise);

    let r = match mode {
        ResidualMode::PredictiveProcess => ResidualCov::Diagonal(DVector::from_element(n, noise)),
        ResidualMode::ModifiedPredictiveProcess => {
            let d = row_dots(&b, &ud.value).map(|v| sigma2 - v);
            // C(s, s) = σ² carries no β dependence.
            let d_b = (row_dots(&b, &ud.d_beta) * 2.0 - row_dots(&(&b * &kd.d_beta), &b)).map(|v| -v);
            let d_bb = (row_dots(&b_bb, &ud.value) * 2.0
                + row_dots(&(&b_b * &kd.d_beta), &b) * 4.0
                + row_dots(&(&b_b * &kd.value), &b_b) * 2.0
                + row_dots(&(&b * &kd.d2_beta), &b))
            .map(|v| -v);
            d_cov[SIGMA2] = DerivMat::Diag(&d / sigma2);
            d_cov[BETA] = DerivMat::Diag(d_b.clone());
            d2_cov[SIGMA2][BETA] = DerivMat::Diag(&d_b / sigma2);
            d2_cov[BETA][BETA] = DerivMat::Diag(d_bb);
            ResidualCov::Diagonal(d.map(|v| v + noise))
        }
        ResidualMode::FullLocal => {
            let cd = cross_cov_beta_derivs(&shard.locs, &shard.locs, kp);
            let mut d = &cd.value - &b * ud.value.transpose();
            symmetrize(&mut d);
            let bkb = &b * &kd.d_beta * b.transpose();
            let ub = &ud.d_beta * b.transpose();
            let mut d_b = &cd.d_beta - &ub - ub.transpose() + bkb;
            symmetrize(&mut d_b);
            let t1 = &b_bb * ud.value.transpose();
            let t2 = &b_b * (&kd.d_beta * b.transpose());
            let t3 = &b_b * (&kd.value * b_b.transpose());
            let t4 = &b * (&kd.d2_beta * b.transpose());
            let mut d_bb = &cd.d2_beta - &t1 - t1.transpose() - (&t2 + t2.transpose()) * 2.0 - t3 * 2.0 - t4;
            symmetrize(&mut d_bb);
            let mut rm = d.clone();
            for i in 0..n {
                rm[(i, i)] += noise;
            }
            let factor = SpdFactor::new(&rm, &format!("residual covariance R_j (worker {})", shard.id))?;
            d_cov[SIGMA2] = DerivMat::Dense(d / sigma2);
            d2_cov[SIGMA2][BETA] = DerivMat::Dense(&d_b / sigma2);
            d_cov[BETA] = DerivMat::Dense(d_b);
            d2_cov[BETA][BETA] = DerivMat::Dense(d_bb);
            ResidualCov::Dense { matrix: rm, factor }
        }
    };
    d2_cov[BETA][SIGMA2] = d2_cov[SIGMA2][BETA].clone();

    let a = r.inverse();
    let ab = r.solve_mat(&b);
    let ab_b = r.solve_mat(&b_b);
    let e = &b * &params.mu - shard.residual(&params.gamma);
    let ae = r.solve_vec(&e);
    let e_b = &b_b * &params.mu;
    let e_bb = &b_bb * &params.mu;
    let ae_b = r.solve_vec(&e_b);
    let sig = &params.sigma;

    let ab_sig = &ab * sig;
    let mut p = &ab_sig * ab.transpose() + &ae * ae.transpose();
    symmetrize(&mut p);
    let tr_aq = frobenius_dot(&ab, &(&b * sig)) + e.dot(&ae);
    let value = 0.5 * r.log_det() + 0.5 * tr_aq;

    let b_b_sig = &b_b * sig;
    let z_beta = &ab_b * sig * b.transpose() + &ab_sig * b_b.transpose() + &ae_b * e.transpose() + &ae * e_b.transpose();
    let mut tr_a_dq = [0.0; 3];
    tr_a_dq[BETA] = 2.0 * frobenius_dot(&ab, &b_b_sig) + 2.0 * ae.dot(&e_b);
    let mut tr_a_d2q = [[0.0; 3]; 3];
    tr_a_d2q[BETA][BETA] = 2.0 * frobenius_dot(&ab, &(&b_bb * sig))
        + 2.0 * frobenius_dot(&ab_b, &b_b_sig)
        + 2.0 * ae.dot(&e_bb)
        + 2.0 * ae_b.dot(&e_b);

    let term = GaussianTerm {
        inv: a,
        p,
        d_cov,
        d2_cov,
        a_dq: [None, None, Some(z_beta)],
        tr_a_dq,
        tr_a_d2q,
    };
    let (grad, hess) = term.grad_hess();

    let m = knots.len();
    let mut cross_mu = DMatrix::zeros(3, m);
    let mut cross_sigma: [DMatrix<f64>; 3] = std::array::from_fn(|_| DMatrix::zeros(m, m));
    for c in 0..3 {
        let r_ab = term.d_cov[c].left_mul(&ab);
        let mut s = -(ab.transpose() * &r_ab);
        let mut row = -(ab.transpose() * term.d_cov[c].apply(&ae));
        if c == BETA {
            let bt_ab = b_b.transpose() * &ab;
            s += &bt_ab + bt_ab.transpose();
            row += b_b.transpose() * &ae + ab.transpose() * &e_b;
        }
        s *= 0.5;
        symmetrize(&mut s);
        cross_sigma[c] = s;
        cross_mu.set_row(c, &row.transpose());
    }

    Ok(ThetaDerivatives {
        value,
        grad,
        hess,
        cross: CrossPartials {
            mu: cross_mu,
            sigma: cross_sigma,
        },
    })
}

/// Gradient and Hessian of `f_j` in `θ̃ = (δ, σ², β)`.
pub fn grad_hess_thetatilde(
    shard: &WorkerShard,
    knots: &KnotSet,
    params: &ModelParams,
    mode: ResidualMode,
) -> Result<(Vector3<f64>, Matrix3<f64>)> {
    let d = local_theta_derivatives(shard, knots, params, mode)?;
    Ok((d.grad, d.hess))
}

/// Mixed partials of `f_j` in `(θ̃, μ)` and `(θ̃, Σ)`.
pub fn cross_partials(
    shard: &WorkerShard,
    knots: &KnotSet,
    params: &ModelParams,
    mode: ResidualMode,
) -> Result<CrossPartials> {
    Ok(local_theta_derivatives(shard, knots, params, mode)?.cross)
}

/// Gradient and Hessian of `h` in `θ̃`; the `δ` row and column are zero.
pub fn h_grad_hess_thetatilde(params: &ModelParams, knots: &KnotSet) -> Result<(Vector3<f64>, Matrix3<f64>)> {
    let kp = &params.kernel;
    let sigma2 = kp.sigma2;
    let kd = cross_cov_beta_derivs(knots.locations(), knots.locations(), kp);
    let kf = SpdFactor::new(&kd.value, "knot covariance K")?;
    let kinv = kf.inverse();
    let w = &params.sigma + &params.mu * params.mu.transpose();
    let mut p = &kinv * w * &kinv;
    symmetrize(&mut p);
    let mut d2_cov = zero_grid();
    d2_cov[SIGMA2][BETA] = DerivMat::Dense(&kd.d_beta / sigma2);
    d2_cov[BETA][SIGMA2] = DerivMat::Dense(&kd.d_beta / sigma2);
    d2_cov[BETA][BETA] = DerivMat::Dense(kd.d2_beta);
    let term = GaussianTerm {
        inv: kinv,
        p,
        d_cov: [DerivMat::Zero, DerivMat::Dense(&kd.value / sigma2), DerivMat::Dense(kd.d_beta)],
        d2_cov,
        a_dq: [None, None, None],
        tr_a_dq: [0.0; 3],
        tr_a_d2q: [[0.0; 3]; 3],
    };
    Ok(term.grad_hess())
}
