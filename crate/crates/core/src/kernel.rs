//! Matérn covariance on the unit square.
//!
//! Only the half-integer smoothness values 1/2, 3/2 and 5/2 are supported;
//! each has a closed form `σ² ρ(s)` with `s = √(2ν)·d/β`, so no Bessel
//! function evaluation is needed. Derivatives are taken with respect to
//! `σ²` and `β`; the smoothness is fixed for a run.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Matérn smoothness `ν`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Smoothness {
    Half,
    ThreeHalves,
    FiveHalves,
}

impl Smoothness {
    pub const ALL: [Smoothness; 3] = [Smoothness::Half, Smoothness::ThreeHalves, Smoothness::FiveHalves];

    pub fn value(self) -> f64 {
        match self {
            Smoothness::Half => 0.5,
            Smoothness::ThreeHalves => 1.5,
            Smoothness::FiveHalves => 2.5,
        }
    }

    pub fn from_value(nu: f64) -> Result<Self> {
        match nu {
            x if x == 0.5 => Ok(Smoothness::Half),
            x if x == 1.5 => Ok(Smoothness::ThreeHalves),
            x if x == 2.5 => Ok(Smoothness::FiveHalves),
            _ => Err(Error::Input(format!(
                "smoothness {nu} unsupported; use 0.5, 1.5 or 2.5"
            ))),
        }
    }

    /// `√(2ν)`, the factor mapping `d/β` to the closed-form argument.
    fn scale(self) -> f64 {
        match self {
            Smoothness::Half => 1.0,
            Smoothness::ThreeHalves => 3f64.sqrt(),
            Smoothness::FiveHalves => 5f64.sqrt(),
        }
    }

    /// Correlation `ρ(s)` and its first two derivatives in `s`.
    fn correlation(self, s: f64) -> (f64, f64, f64) {
        let e = (-s).exp();
        match self {
            Smoothness::Half => (e, -e, e),
            Smoothness::ThreeHalves => ((1.0 + s) * e, -s * e, (s - 1.0) * e),
            Smoothness::FiveHalves => (
                (1.0 + s + s * s / 3.0) * e,
                -s * (1.0 + s) / 3.0 * e,
                (s * s - s - 1.0) / 3.0 * e,
            ),
        }
    }
}

impl fmt::Display for Smoothness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.value())
    }
}

impl FromStr for Smoothness {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let v: f64 = s
            .trim()
            .parse()
            .map_err(|_| Error::Input(format!("cannot parse smoothness '{s}'")))?;
        Smoothness::from_value(v)
    }
}

/// Matérn parameters `(ν, σ², β)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelParams {
    pub nu: Smoothness,
    pub sigma2: f64,
    pub beta: f64,
}

impl KernelParams {
    pub fn new(nu: Smoothness, sigma2: f64, beta: f64) -> Result<Self> {
        let kp = Self { nu, sigma2, beta };
        kp.validate()?;
        Ok(kp)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2.is_finite() && self.sigma2 > 0.0) {
            return Err(Error::Input(format!("sigma2 must be positive, got {}", self.sigma2)));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::Input(format!("beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }

    /// Length scale giving the requested effective range for this smoothness.
    pub fn beta_for_range(nu: Smoothness, range: f64) -> f64 {
        let unit = KernelParams { nu, sigma2: 1.0, beta: 1.0 };
        range / effective_range(&unit)
    }
}

/// A point of the spatial domain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Location(pub [f64; 2]);

impl Location {
    pub fn new(x: f64, y: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite()) {
            return Err(Error::Input(format!("location ({x}, {y}) is not finite")));
        }
        Ok(Location([x, y]))
    }

    pub fn x(&self) -> f64 {
        self.0[0]
    }

    pub fn y(&self) -> f64 {
        self.0[1]
    }

    pub fn dist(&self, other: &Location) -> f64 {
        let dx = self.0[0] - other.0[0];
        let dy = self.0[1] - other.0[1];
        (dx * dx + dy * dy).sqrt()
    }
}

/// Precision `δ` of the measurement noise; the noise variance is `1/δ`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct NoisePrecision(f64);

impl NoisePrecision {
    pub fn new(delta: f64) -> Result<Self> {
        if !(delta.is_finite() && delta > 0.0) {
            return Err(Error::Input(format!("noise precision must be positive, got {delta}")));
        }
        Ok(NoisePrecision(delta))
    }

    pub fn get(self) -> f64 {
        self.0
    }

    pub fn variance(self) -> f64 {
        1.0 / self.0
    }
}

fn check_distance(d: f64) -> Result<()> {
    if !d.is_finite() || d < 0.0 {
        return Err(Error::Input(format!("distance must be finite and non-negative, got {d}")));
    }
    Ok(())
}

#[inline]
fn value_unchecked(d: f64, kp: &KernelParams) -> f64 {
    if d == 0.0 {
        return kp.sigma2;
    }
    let s = kp.nu.scale() * d / kp.beta;
    kp.sigma2 * kp.nu.correlation(s).0
}

/// `(c, ∂c/∂β, ∂²c/∂β²)` at distance `d`.
#[inline]
fn beta_terms_unchecked(d: f64, kp: &KernelParams) -> (f64, f64, f64) {
    if d == 0.0 {
        return (kp.sigma2, 0.0, 0.0);
    }
    let s = kp.nu.scale() * d / kp.beta;
    let (rho, d1, d2) = kp.nu.correlation(s);
    let b = kp.beta;
    (
        kp.sigma2 * rho,
        -kp.sigma2 * d1 * s / b,
        kp.sigma2 * (d2 * s * s + 2.0 * s * d1) / (b * b),
    )
}

/// Matérn covariance at distance `d`; exactly `σ²` at `d = 0`.
pub fn matern(d: f64, kp: &KernelParams) -> Result<f64> {
    check_distance(d)?;
    Ok(value_unchecked(d, kp))
}

/// `(∂c/∂σ², ∂c/∂β)` at distance `d`.
pub fn matern_grad(d: f64, kp: &KernelParams) -> Result<(f64, f64)> {
    check_distance(d)?;
    let (c, dbeta, _) = beta_terms_unchecked(d, kp);
    Ok((c / kp.sigma2, dbeta))
}

/// `∂²c/∂β²` at distance `d`. The mixed partial is `(∂c/∂β)/σ²` and
/// `∂²c/∂(σ²)² = 0`.
pub fn matern_beta_second(d: f64, kp: &KernelParams) -> Result<f64> {
    check_distance(d)?;
    Ok(beta_terms_unchecked(d, kp).2)
}

/// Covariance matrix `C(A, B)`; symmetrized when `A` and `B` are the same set.
pub fn cross_cov(a: &[Location], b: &[Location], kp: &KernelParams) -> DMatrix<f64> {
    if a == b {
        return cov_matrix(a, kp);
    }
    DMatrix::from_fn(a.len(), b.len(), |i, j| value_unchecked(a[i].dist(&b[j]), kp))
}

/// `C(A, A)`, computed on the upper triangle and mirrored.
pub fn cov_matrix(a: &[Location], kp: &KernelParams) -> DMatrix<f64> {
    let n = a.len();
    let mut m = DMatrix::zeros(n, n);
    for j in 0..n {
        m[(j, j)] = kp.sigma2;
        for i in 0..j {
            let v = value_unchecked(a[i].dist(&a[j]), kp);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// `C(A, B)` together with its first and second derivatives in `β`.
#[derive(Clone, Debug)]
pub struct CovWithBetaDerivs {
    pub value: DMatrix<f64>,
    pub d_beta: DMatrix<f64>,
    pub d2_beta: DMatrix<f64>,
}

pub fn cross_cov_beta_derivs(a: &[Location], b: &[Location], kp: &KernelParams) -> CovWithBetaDerivs {
    let (n, m) = (a.len(), b.len());
    let mut value = DMatrix::zeros(n, m);
    let mut d_beta = DMatrix::zeros(n, m);
    let mut d2_beta = DMatrix::zeros(n, m);
    let same = a == b;
    for j in 0..m {
        let lo = if same { j } else { 0 };
        for i in lo..n {
            let (c, d1, d2) = beta_terms_unchecked(a[i].dist(&b[j]), kp);
            value[(i, j)] = c;
            d_beta[(i, j)] = d1;
            d2_beta[(i, j)] = d2;
            if same {
                value[(j, i)] = c;
                d_beta[(j, i)] = d1;
                d2_beta[(j, i)] = d2;
            }
        }
    }
    CovWithBetaDerivs { value, d_beta, d2_beta }
}

/// Distance at which the correlation drops to 0.05, by bisection on `[0, 20β]`.
pub fn effective_range(kp: &KernelParams) -> f64 {
    let target = 0.05;
    let corr = |d: f64| value_unchecked(d, kp) / kp.sigma2;
    let (mut lo, mut hi) = (0.0, 20.0 * kp.beta);
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if corr(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
