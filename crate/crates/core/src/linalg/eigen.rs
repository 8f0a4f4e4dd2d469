//! Symmetric eigendecomposition by cyclic two-sided Jacobi rotations.

use crate::error::{Error, Result};
use crate::linalg::matrix::Matrix;

/// `a = vectors · diag(values) · vectorsᵀ`, values ascending.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

impl SymmetricEigen {
    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        *self.values.last().expect("non-empty spectrum")
    }

    /// `vectors · diag(f(values)) · vectorsᵀ`.
    pub fn spectral_map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let n = self.values.len();
        let scaled = Matrix::from_fn(n, n, |i, j| self.vectors[(i, j)] * f(self.values[j]));
        scaled.matmul_t(&self.vectors).expect("square factors")
    }
}

pub fn symmetric_eigen(a: &Matrix) -> Result<SymmetricEigen> {
    a.ensure_finite()?;
    let n = a.rows();
    if n == 0 || a.cols() != n {
        return Err(Error::InvalidArgument(format!(
            "eigendecomposition needs a non-empty square matrix, got {:?}",
            a.shape()
        )));
    }
    let scale = a.frobenius_norm();
    if !a.is_symmetric(1e-12 * scale.max(1.0)) {
        return Err(Error::InvalidArgument("matrix is not symmetric".into()));
    }
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    let max_sweeps = 100 * n.max(1);
    let mut sweeps = 0;
    loop {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-14 * scale || scale == 0.0 {
            break;
        }
        if sweeps >= max_sweeps {
            return Err(Error::NoConvergence {
                sweeps,
                residual: off / scale,
            });
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].total_cmp(&m[(j, j)]));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = Matrix::from_fn(n, n, |i, k| v[(i, order[k])]);
    Ok(SymmetricEigen { values, vectors })
}

/// Ratio of largest to smallest eigenvalue; infinite when the smallest is
/// not positive.
pub fn condition_number(eig: &SymmetricEigen) -> f64 {
    if eig.min() <= 0.0 {
        f64::INFINITY
    } else {
        eig.max() / eig.min()
    }
}
