//! Small dense linear-algebra kernels shared by the fitting code.
//!
//! Everything here works on `f64` and stays deliberately simple: the matrices
//! involved are at most a few thousand on a side, so an unblocked Cholesky and
//! classic Gram-Schmidt are plenty.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    /// Cholesky hit a non-positive pivot: the matrix is not positive definite.
    #[error("matrix is not positive definite (pivot {pivot:.3e} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Lower-triangular Cholesky factor `L` with `A = L L^T`.
///
/// `a` must be symmetric; only the lower triangle is read.
pub fn cholesky(a: &Array2<f64>) -> Result<Array2<f64>, LinalgError> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(LinalgError::DimensionMismatch(format!(
            "cholesky expects a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut diag = a[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !diag.is_finite() || diag <= 0.0 {
            return Err(LinalgError::NotPositiveDefinite { row: j, pivot: diag });
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Solves `A x = b` for one right-hand side given the Cholesky factor of `A`.
pub fn cholesky_solve_vec(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    debug_assert_eq!(b.len(), n);
    // forward: L y = b
    let mut y = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    // backward: L^T x = y
    let mut x = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Solves `A X = B` column-by-column via one Cholesky factorization of `A`.
pub fn solve_spd(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>, LinalgError> {
    if a.nrows() != b.nrows() {
        return Err(LinalgError::DimensionMismatch(format!(
            "solve_spd: A is {}x{} but B has {} rows",
            a.nrows(),
            a.ncols(),
            b.nrows()
        )));
    }
    let l = cholesky(a)?;
    let mut x = Array2::<f64>::zeros(b.raw_dim());
    for (j, col) in b.axis_iter(Axis(1)).enumerate() {
        let sol = cholesky_solve_vec(&l, &col.to_owned());
        x.column_mut(j).assign(&sol);
    }
    Ok(x)
}

/// Random orthogonal `d x d` matrix via Gram-Schmidt on a Gaussian draw.
///
/// Deterministic given the RNG state. Degenerate columns (numerically zero
/// after projection) are replaced by fresh draws, so the result always has
/// orthonormal columns.
pub fn random_orthogonal<R: Rng>(d: usize, rng: &mut R) -> Array2<f64> {
    let mut q = Array2::<f64>::zeros((d, d));
    for j in 0..d {
        loop {
            let mut v: Array1<f64> = Array1::from_iter((0..d).map(|_| rng.sample(StandardNormal)));
            for k in 0..j {
                let qk = q.column(k);
                let proj = v.dot(&qk);
                v = &v - &(&qk * proj);
            }
            let norm = v.dot(&v).sqrt();
            if norm > 1e-8 {
                q.column_mut(j).assign(&(&v / norm));
                break;
            }
        }
    }
    q
}

pub fn frobenius_norm(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}
