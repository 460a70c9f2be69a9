//! Singular values via one-sided Jacobi rotations, and the numerical rank of
//! a batch representation matrix.

use crate::error::{CoreError, Result};

/// Convergence threshold for the Jacobi sweeps: a column pair counts as
/// orthogonal when |<p,q>| <= JACOBI_TOL * sqrt(|p|^2 |q|^2).
const JACOBI_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;

/// Singular values sorted in descending order.
#[derive(Debug, Clone, PartialEq)]
pub struct SingularSpectrum {
    values: Vec<f64>,
}

impl SingularSpectrum {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of singular values strictly above `epsilon`.
    pub fn count_above(&self, epsilon: f64) -> usize {
        self.values.iter().filter(|&&s| s > epsilon).count()
    }
}

/// Singular values of a row-major `rows x cols` matrix.
///
/// One-sided Jacobi (Hestenes) on the shorter side: rotations orthogonalize
/// column pairs, which diagonalizes M^T M implicitly; the singular values are
/// the column norms at convergence. Rotations are orthogonal, so the sum of
/// squared singular values equals the squared Frobenius norm.
pub fn svd_values(m: &[f64], rows: usize, cols: usize) -> Result<SingularSpectrum> {
    assert!(rows >= 1 && cols >= 1, "svd of an empty matrix");
    assert_eq!(m.len(), rows * cols);
    if m.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::NonFinite { context: "svd_values" });
    }

    // Work on a matrix with ncols <= nrows so we orthogonalize the short side.
    let (nr, nc, mut a) = if cols <= rows {
        (rows, cols, m.to_vec())
    } else {
        let mut t = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = m[i * cols + j];
            }
        }
        (cols, rows, t)
    };

    let col_dot = |a: &[f64], p: usize, q: usize| -> f64 {
        let mut acc = 0.0;
        for i in 0..nr {
            acc += a[i * nc + p] * a[i * nc + q];
        }
        acc
    };

    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..nc.saturating_sub(1) {
            for q in (p + 1)..nc {
                let app = col_dot(&a, p, p);
                let aqq = col_dot(&a, q, q);
                let apq = col_dot(&a, p, q);
                if apq.abs() <= JACOBI_TOL * (app * aqq).sqrt() {
                    continue;
                }
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..nr {
                    let vp = a[i * nc + p];
                    let vq = a[i * nc + q];
                    a[i * nc + p] = c * vp - s * vq;
                    a[i * nc + q] = s * vp + c * vq;
                }
                rotated = true;
            }
        }
        if !rotated {
            break;
        }
    }

    let mut values: Vec<f64> = (0..nc).map(|j| col_dot(&a, j, j).sqrt()).collect();
    values.sort_by(|x, y| y.partial_cmp(x).unwrap());
    Ok(SingularSpectrum { values })
}

/// Count of singular values of `M / sqrt(n)` strictly above `epsilon`, where
/// `n` is the number of rows. The matrix is scaled before decomposition; ties
/// at exactly `epsilon` are excluded.
pub fn numerical_rank(m: &[f64], rows: usize, cols: usize, epsilon: f64) -> Result<usize> {
    assert!(epsilon >= 0.0, "epsilon must be non-negative");
    let scale = 1.0 / (rows as f64).sqrt();
    let scaled: Vec<f64> = m.iter().map(|v| v * scale).collect();
    Ok(svd_values(&scaled, rows, cols)?.count_above(epsilon))
}
