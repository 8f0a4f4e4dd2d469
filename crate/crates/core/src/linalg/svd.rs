//! Thin SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! The input is oriented so that it has at least as many rows as columns;
//! rotations are applied to pairs of columns until every pair is orthogonal
//! to within a relative tolerance. Column norms are then the singular values.

use crate::error::{Error, Result};
use crate::linalg::matrix::{dot, Matrix};

/// Off-diagonal tolerance: a column pair is treated as orthogonal when
/// `|⟨a_p, a_q⟩| ≤ TOL · ‖a_p‖‖a_q‖`.
pub const SVD_TOLERANCE: f64 = 1e-12;

/// Entries below this magnitude are skipped when fixing the sign convention.
const SIGN_THRESHOLD: f64 = 1e-12;

/// `m = u · diag(sigma) · vᵀ` with `k = min(rows, cols)` triplets.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl ThinSvd {
    pub fn rank_k(&self) -> usize {
        self.sigma.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        let us = Matrix::from_fn(self.u.rows(), self.sigma.len(), |i, j| {
            self.u[(i, j)] * self.sigma[j]
        });
        us.matmul_t(&self.v).expect("consistent factor shapes")
    }
}

pub fn thin_svd(m: &Matrix) -> Result<ThinSvd> {
    m.ensure_finite()?;
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::InvalidArgument("SVD of an empty matrix".into()));
    }
    if m.rows() >= m.cols() {
        tall_svd(m)
    } else {
        let t = tall_svd(&m.transpose())?;
        // A = (Aᵀ)ᵀ = V Σ Uᵀ; swap roles, then re-apply the sign rule to the new left factor.
        let mut out = ThinSvd {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        };
        fix_signs(&mut out);
        Ok(out)
    }
}

/// One-sided Jacobi for `rows ≥ cols`. Works on `mᵀ` so that each column of
/// `m` is a contiguous row.
fn tall_svd(m: &Matrix) -> Result<ThinSvd> {
    let (rows, n) = m.shape();
    let mut cols = m.transpose(); // n × rows, row j = column j of m
    let mut vt = Matrix::identity(n); // row j = column j of V
    let max_sweeps = 100 * n;

    let mut converged = n == 1;
    let mut residual = 0.0;
    let mut sweeps = 0;
    while !converged && sweeps < max_sweeps {
        sweeps += 1;
        residual = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = {
                    let cp = cols.row(p);
                    let cq = cols.row(q);
                    (dot(cp, cp), dot(cq, cq), dot(cp, cq))
                };
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let rel = gamma.abs() / (alpha * beta).sqrt();
                residual = f64::max(residual, rel);
                if rel <= SVD_TOLERANCE {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut cols, p, q, c, s);
                rotate_rows(&mut vt, p, q, c, s);
            }
        }
        converged = residual <= SVD_TOLERANCE;
    }
    if !converged {
        return Err(Error::NoConvergence { sweeps, residual });
    }

    let norms: Vec<f64> = (0..n)
        .map(|j| dot(cols.row(j), cols.row(j)).sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));

    let sigma_max = norms[order[0]];
    let negligible = sigma_max * f64::EPSILON * rows as f64;

    let mut u = Matrix::zeros(rows, n);
    let mut v = Matrix::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        let s = norms[j];
        if s > negligible && s > 0.0 {
            for i in 0..rows {
                u[(i, k)] = cols[(j, i)] / s;
            }
            sigma.push(s);
        } else {
            deficient.push(k);
            sigma.push(0.0);
        }
        for i in 0..n {
            v[(i, k)] = vt[(j, i)];
        }
    }
    complete_basis(&mut u, &deficient);

    let mut out = ThinSvd { u, sigma, v };
    fix_signs(&mut out);
    Ok(out)
}

fn rotate_rows(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let cols = m.cols();
    let data = m.as_mut_slice();
    let (head, tail) = data.split_at_mut(q * cols);
    let rp = &mut head[p * cols..(p + 1) * cols];
    let rq = &mut tail[..cols];
    for (a, b) in rp.iter_mut().zip(rq.iter_mut()) {
        let x = *a;
        let y = *b;
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

/// Fills the listed columns of `u` with unit vectors orthogonal to every
/// other column, by Gram–Schmidt over the standard basis.
fn complete_basis(u: &mut Matrix, missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let rows = u.rows();
    let mut filled: Vec<usize> = (0..u.cols()).filter(|j| !missing.contains(j)).collect();
    let mut candidate = 0;
    for &k in missing {
        loop {
            assert!(candidate < rows, "basis completion exhausted");
            let mut e = vec![0.0; rows];
            e[candidate] = 1.0;
            candidate += 1;
            // two passes of classical Gram–Schmidt
            for _ in 0..2 {
                for &j in &filled {
                    let proj: f64 = (0..rows).map(|i| u[(i, j)] * e[i]).sum();
                    for (i, ei) in e.iter_mut().enumerate() {
                        *ei -= proj * u[(i, j)];
                    }
                }
            }
            let nrm = dot(&e, &e).sqrt();
            if nrm > 1e-8 {
                for (i, ei) in e.iter().enumerate() {
                    u[(i, k)] = ei / nrm;
                }
                filled.push(k);
                break;
            }
        }
    }
}

/// Flips paired columns so the first non-negligible entry of each left
/// singular vector is non-negative.
fn fix_signs(svd: &mut ThinSvd) {
    for k in 0..svd.sigma.len() {
        let first = (0..svd.u.rows())
            .map(|i| svd.u[(i, k)])
            .find(|x| x.abs() > SIGN_THRESHOLD);
        if matches!(first, Some(x) if x < 0.0) {
            for i in 0..svd.u.rows() {
                svd.u[(i, k)] = -svd.u[(i, k)];
            }
            for i in 0..svd.v.rows() {
                svd.v[(i, k)] = -svd.v[(i, k)];
            }
        }
    }
}

/// The `rows × r` matrix of the leading `r` left singular vectors.
pub fn first_r_left_singular_vectors(g: &Matrix, r: usize) -> Result<Matrix> {
    let k = g.rows().min(g.cols());
    if r == 0 || r > k {
        return Err(Error::Rank {
            rank: r,
            rows: g.rows(),
            cols: g.cols(),
        });
    }
    Ok(thin_svd(g)?.u.leading_columns(r))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_svd_invariants(m: &Matrix, svd: &ThinSvd) {
        assert!(svd.u.orthonormality_defect() <= 1e-10);
        assert!(svd.v.orthonormality_defect() <= 1e-10);
        assert!(svd.sigma.windows(2).all(|w| w[0] >= w[1]));
        assert!(svd.sigma.iter().all(|&s| s >= 0.0));
        let err = svd.reconstruct().sub(m).unwrap().frobenius_norm();
        let scale = m.frobenius_norm().max(1e-300);
        assert!(err / scale <= 1e-8 || err <= 1e-300, "reconstruction {err}");
    }

    #[test]
    fn identity_3x3() {
        let svd = thin_svd(&Matrix::identity(3)).unwrap();
        assert_eq!(svd.sigma, vec![1.0, 1.0, 1.0]);
        assert_eq!(svd.u, Matrix::identity(3));
        assert_eq!(svd.v, Matrix::identity(3));
    }

    #[test]
    fn diagonal_2x2() {
        let svd = thin_svd(&Matrix::diag(&[3.0, 1.0])).unwrap();
        assert_eq!(svd.sigma, vec![3.0, 1.0]);
        assert_eq!(svd.u, Matrix::identity(2));
        assert_eq!(svd.v, Matrix::identity(2));
    }

    #[test]
    fn diagonal_out_of_order_is_sorted() {
        let m = Matrix::diag(&[1.0, 5.0, 2.0]);
        let svd = thin_svd(&m).unwrap();
        assert_eq!(svd.sigma, vec![5.0, 2.0, 1.0]);
        assert_svd_invariants(&m, &svd);
    }

    #[test]
    fn wide_and_tall_and_deficient() {
        let wide = Matrix::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![2.0, 4.0, 6.0, 8.0]]);
        let svd = thin_svd(&wide).unwrap();
        assert_eq!(svd.u.shape(), (2, 2));
        assert_eq!(svd.v.shape(), (4, 2));
        assert!(svd.sigma[1].abs() < 1e-12);
        assert_svd_invariants(&wide, &svd);
        let tall = wide.transpose();
        assert_svd_invariants(&tall, &thin_svd(&tall).unwrap());
    }

    #[test]
    fn zero_matrix() {
        let z = Matrix::zeros(3, 2);
        let svd = thin_svd(&z).unwrap();
        assert_eq!(svd.sigma, vec![0.0, 0.0]);
        assert!(svd.u.orthonormality_defect() <= 1e-12);
    }

    #[test]
    fn sign_convention() {
        let m = Matrix::diag(&[-2.0, 1.0]);
        let svd = thin_svd(&m).unwrap();
        assert!(svd.u[(0, 0)] > 0.0);
        assert_svd_invariants(&m, &svd);
    }

    #[test]
    fn non_finite_rejected() {
        let mut m = Matrix::identity(2);
        m[(0, 1)] = f64::NAN;
        assert!(matches!(thin_svd(&m), Err(Error::NonFinite)));
        assert_eq!(Error::NonFinite.to_string(), "non-finite matrix");
    }

    #[test]
    fn leading_vectors() {
        let p = first_r_left_singular_vectors(&Matrix::diag(&[5.0, 2.0]), 1).unwrap();
        assert_eq!(p, Matrix::from_rows(&[vec![1.0], vec![0.0]]));
        assert!(first_r_left_singular_vectors(&Matrix::identity(2), 3).is_err());
        assert!(first_r_left_singular_vectors(&Matrix::identity(2), 0).is_err());
        let p = first_r_left_singular_vectors(&Matrix::identity(3), 3).unwrap();
        assert!(p.orthonormality_defect() <= 1e-12);
    }
}
