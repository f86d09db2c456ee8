//! Dense linear-algebra helpers shared by the estimators.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Relative jitter added on the single Cholesky retry.
pub const CHOLESKY_JITTER: f64 = 1e-10;

/// Replaces `m` by `(m + mᵀ) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn symmetrized(mut m: DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&mut m);
    m
}

/// `tr(A B)` without forming the product.
pub fn trace_of_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(a.ncols(), b.nrows());
    debug_assert_eq!(a.nrows(), b.ncols());
    let mut acc = 0.0;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

/// Frobenius inner product `Σ_ij A_ij B_ij`.
pub fn frobenius_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Cholesky factor of a symmetric positive definite matrix.
///
/// Factorization is attempted once as given and once more with
/// `1e-10 · mean(diag) · I` added; a second failure is an error naming
/// `context`.
#[derive(Clone, Debug)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    jittered: bool,
}

impl SpdFactor {
    pub fn new(matrix: &DMatrix<f64>, context: &str) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::Input(format!("{context}: matrix is not square")));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(context, "matrix has non-finite entries"));
        }
        if let Some(chol) = Cholesky::new(matrix.clone()) {
            return Ok(Self { chol, jittered: false });
        }
        let n = matrix.nrows();
        let mean_diag = matrix.diagonal().sum() / n.max(1) as f64;
        let mut bumped = matrix.clone();
        let eps = CHOLESKY_JITTER * mean_diag.abs().max(f64::MIN_POSITIVE);
        for i in 0..n {
            bumped[(i, i)] += eps;
        }
        match Cholesky::new(bumped) {
            Some(chol) => {
                log::debug!("{context}: Cholesky needed jitter {eps:e}");
                Ok(Self { chol, jittered: true })
            }
            None => Err(Error::numerical(
                context,
                format!("{n}x{n} matrix not positive definite after jitter (mean diagonal {mean_diag:e})"),
            )),
        }
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn was_jittered(&self) -> bool {
        self.jittered
    }

    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        symmetrized(self.chol.inverse())
    }
}

/// Symmetric eigendecomposition returning `(eigenvalues, eigenvectors)`.
pub fn sym_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let e = nalgebra::SymmetricEigen::new(symmetrized(m.clone()));
    (e.eigenvalues, e.eigenvectors)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigen(m).0.iter().cloned().fold(f64::INFINITY, f64::min)
}
