//! Conditioning of the factored objective `L(B, A) = ℓ(BA)` for quadratic `ℓ`.

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::linalg::{
    kaiming_uniform_init, symmetric_eigen, thin_svd, Matrix, SeededRng, SymmetricEigen,
};

/// `ℓ(W) = ½ vec(W − W̄)ᵀ H vec(W − W̄)` with column-major `vec`.
#[derive(Debug, Clone)]
pub struct QuadraticLoss {
    m: usize,
    n: usize,
    h: Matrix,
    w_bar: Matrix,
    eig: SymmetricEigen,
}

impl QuadraticLoss {
    pub fn new(h: Matrix, w_bar: Matrix) -> Result<Self> {
        let (m, n) = w_bar.shape();
        h.ensure_shape("quadratic Hessian", (m * n, m * n))?;
        if !h.is_symmetric(1e-12 * h.frobenius_norm().max(1.0)) {
            return Err(invalid("loss Hessian is not symmetric"));
        }
        let eig = symmetric_eigen(&h)?;
        if eig.min() <= 0.0 {
            return Err(invalid(format!(
                "loss Hessian is not positive definite (λ_min = {:e})",
                eig.min()
            )));
        }
        Ok(Self {
            m,
            n,
            h,
            w_bar,
            eig,
        })
    }

    /// `c·I` Hessian.
    pub fn isotropic(c: f64, w_bar: Matrix) -> Result<Self> {
        let d = w_bar.len();
        Self::new(Matrix::identity(d).scale(c), w_bar)
    }

    /// Random SPD Hessian `QDQᵀ` with eigenvalues uniform on `[lo, hi]`.
    pub fn random(w_bar: Matrix, lo: f64, hi: f64, rng: &mut SeededRng) -> Result<Self> {
        let d = w_bar.len();
        let g = Matrix::from_fn(d, d, |_, _| rng.normal());
        let q = thin_svd(&g)?.u;
        let vals: Vec<f64> = (0..d).map(|_| rng.uniform(lo, hi)).collect();
        let mut qd = q.clone();
        for i in 0..d {
            for (j, &v) in vals.iter().enumerate() {
                qd.as_mut_slice()[i * d + j] *= v;
            }
        }
        Self::new(symmetrize(&qd.matmul_t(&q)?), w_bar)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.m, self.n)
    }

    pub fn hessian(&self) -> &Matrix {
        &self.h
    }

    pub fn minimizer(&self) -> &Matrix {
        &self.w_bar
    }

    pub fn lambda_min(&self) -> f64 {
        self.eig.min()
    }

    pub fn lambda_max(&self) -> f64 {
        self.eig.max()
    }

    pub fn value(&self, w: &Matrix) -> Result<f64> {
        let d = w.sub(&self.w_bar)?.vec_col_major();
        let hd = self.h.matmul(&Matrix::from_vec(d.len(), 1, d.clone())?)?;
        Ok(0.5 * d.iter().zip(hd.as_slice()).map(|(a, b)| a * b).sum::<f64>())
    }

    fn sqrt_h(&self) -> Matrix {
        symmetrize(&self.eig.spectral_map(f64::sqrt))
    }
}

pub(crate) fn symmetrize(a: &Matrix) -> Matrix {
    let t = a.transpose();
    let mut s = a.add(&t).expect("square");
    s.scale_in_place(0.5);
    s
}

/// `κ` that treats an eigenvalue below `1e-12·λ_max` as zero.
pub fn robust_condition(eig: &SymmetricEigen) -> f64 {
    let max = eig.max();
    let min = eig.min();
    if max <= 0.0 || min <= 1e-12 * max {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Extreme eigenvalues of `AᵀA` and `BBᵀ` and the ratio built from them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FactorSpectra {
    pub ata_max: f64,
    pub ata_min: f64,
    pub bbt_max: f64,
    pub bbt_min: f64,
}

impl FactorSpectra {
    pub fn of(b: &Matrix, a: &Matrix) -> Result<Self> {
        let ata = symmetric_eigen(&symmetrize(&a.t_matmul(a)?))?;
        let bbt = symmetric_eigen(&symmetrize(&b.matmul_t(b)?))?;
        let clip = |x: f64| x.max(0.0);
        Ok(Self {
            ata_max: clip(ata.max()),
            ata_min: clip(ata.min()),
            bbt_max: clip(bbt.max()),
            bbt_min: clip(bbt.min()),
        })
    }

    /// `(λmax(AᵀA) + λmax(BBᵀ)) / (λmin(AᵀA) + λmin(BBᵀ))`.
    pub fn balance_ratio(&self) -> f64 {
        let den = self.ata_min + self.bbt_min;
        if den <= 0.0 {
            f64::INFINITY
        } else {
            (self.ata_max + self.bbt_max) / den
        }
    }
}

#[derive(Debug, Clone)]
pub struct FactoredHessian {
    /// `H^{1/2}(AᵀA ⊗ I_m + I_n ⊗ BBᵀ)H^{1/2}`.
    pub h_star: Matrix,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub kappa: f64,
    pub spectra: FactorSpectra,
}

/// `J = [Aᵀ ⊗ I_m, I_n ⊗ B]`, the Jacobian of `vec(BA)` in `[vec B; vec A]`.
pub fn factor_jacobian(b: &Matrix, a: &Matrix) -> Result<Matrix> {
    let (m, r) = b.shape();
    let n = a.cols();
    a.ensure_shape("factor_jacobian", (r, n))?;
    let left = a.transpose().kron(&Matrix::identity(m));
    let right = Matrix::identity(n).kron(b);
    let mn = m * n;
    Ok(Matrix::from_fn(mn, m * r + r * n, |i, j| {
        if j < m * r {
            left[(i, j)]
        } else {
            right[(i, j - m * r)]
        }
    }))
}

pub fn assemble_factored_hessian(
    b: &Matrix,
    a: &Matrix,
    loss: &QuadraticLoss,
) -> Result<FactoredHessian> {
    b.ensure_finite()?;
    a.ensure_finite()?;
    let (m, r) = b.shape();
    let n = a.cols();
    a.ensure_shape("assemble_factored_hessian", (r, n))?;
    if loss.shape() != (m, n) {
        return Err(Error::Shape {
            op: "assemble_factored_hessian",
            expected: (m, n),
            got: loss.shape(),
        });
    }
    let ata = a.t_matmul(a)?;
    let bbt = b.matmul_t(b)?;
    let mut k = ata.kron(&Matrix::identity(m));
    k.add_assign(&Matrix::identity(n).kron(&bbt))?;
    let sh = loss.sqrt_h();
    let h_star = symmetrize(&sh.matmul(&k)?.matmul(&sh)?);
    let eig = symmetric_eigen(&h_star)?;
    Ok(FactoredHessian {
        lambda_min: eig.min(),
        lambda_max: eig.max(),
        kappa: robust_condition(&eig),
        h_star,
        spectra: FactorSpectra::of(b, a)?,
    })
}

/// Hessian of `L(B, A) = ℓ(BA)` in `[vec B; vec A]` coordinates, exact for
/// quadratic `ℓ`: `JᵀHJ` plus the curvature coupling through `∇ℓ(BA)`.
pub fn parameter_hessian(b: &Matrix, a: &Matrix, loss: &QuadraticLoss) -> Result<Matrix> {
    let (m, r) = b.shape();
    let n = a.cols();
    let j = factor_jacobian(b, a)?;
    let mut hess = j.t_matmul(&loss.h.matmul(&j)?)?;
    let resid = b.matmul(a)?.sub(&loss.w_bar)?.vec_col_major();
    let g = loss.h.matmul(&Matrix::from_vec(resid.len(), 1, resid)?)?;
    let g = Matrix::from_col_major(m, n, g.as_slice())?;
    // ⟨G, ΔB ΔA⟩: ∂²/∂B_{ip}∂A_{pj} = G_{ij}
    let nb = m * r;
    for i in 0..m {
        for p in 0..r {
            let bi = p * m + i;
            for jj in 0..n {
                let ai = nb + jj * r + p;
                let v = g[(i, jj)];
                hess.as_mut_slice()[bi * (nb + r * n) + ai] += v;
                hess.as_mut_slice()[ai * (nb + r * n) + bi] += v;
            }
        }
    }
    Ok(hess)
}

/// Central-difference Hessian of `L(B, A) = ℓ(BA)`.
pub fn finite_difference_hessian(
    b: &Matrix,
    a: &Matrix,
    loss: &QuadraticLoss,
    step: f64,
) -> Result<Matrix> {
    let (m, r) = b.shape();
    let n = a.cols();
    let mut x: Vec<f64> = b.vec_col_major();
    x.extend(a.vec_col_major());
    let dim = x.len();
    let eval = |x: &[f64]| -> Result<f64> {
        let bb = Matrix::from_col_major(m, r, &x[..m * r])?;
        let aa = Matrix::from_col_major(r, n, &x[m * r..])?;
        loss.value(&bb.matmul(&aa)?)
    };
    let mut out = Matrix::zeros(dim, dim);
    let mut probe = x.clone();
    for i in 0..dim {
        for j in i..dim {
            let mut f = [0.0; 4];
            for (slot, (si, sj)) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)]
                .into_iter()
                .enumerate()
            {
                probe.copy_from_slice(&x);
                probe[i] += si * step;
                probe[j] += sj * step;
                f[slot] = eval(&probe)?;
            }
            let v = (f[0] - f[1] - f[2] + f[3]) / (4.0 * step * step);
            out.as_mut_slice()[i * dim + j] = v;
            out.as_mut_slice()[j * dim + i] = v;
        }
    }
    Ok(out)
}

/// One conditioning instance at a stationary point: `W̄ = b·a`.
#[derive(Debug, Clone)]
pub struct Lemma1Instance {
    pub seed: u64,
    pub b: Matrix,
    pub a: Matrix,
    pub loss: QuadraticLoss,
}

impl Lemma1Instance {
    /// `r = min(m, n) ≤ 3`, the other side in `r..=6`, random SPD Hessian
    /// with eigenvalues in `[0.5, 5]`, Kaiming-uniform factors.
    pub fn random(seed: u64) -> Result<Self> {
        let mut rng = SeededRng::new(seed);
        let r = 1 + rng.below(3);
        let other = r + rng.below(7 - r);
        let (m, n) = if rng.below(2) == 0 {
            (r, other)
        } else {
            (other, r)
        };
        let b = kaiming_uniform_init(m, r, &mut rng)?;
        let a = kaiming_uniform_init(r, n, &mut rng)?;
        let loss = QuadraticLoss::random(b.matmul(&a)?, 0.5, 5.0, &mut rng)?;
        Ok(Self { seed, b, a, loss })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Lemma1Row {
    pub seed: u64,
    pub shape: (usize, usize, usize),
    pub kappa: f64,
    pub lower: f64,
    pub upper: f64,
    pub violated: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Lemma1Report {
    pub slack: f64,
    pub rows: Vec<Lemma1Row>,
}

impl Lemma1Report {
    pub fn violations(&self) -> usize {
        self.rows.iter().filter(|r| r.violated).count()
    }
}

/// Checks `λ̲·ρ/λ̄ ≤ κ(H*) ≤ λ̄·ρ/λ̲` with `ρ` the factor balance ratio,
/// within relative `slack`. Rows are sorted by seed.
pub fn verify_lemma1_bounds(instances: &[Lemma1Instance], slack: f64) -> Result<Lemma1Report> {
    let mut rows = Vec::with_capacity(instances.len());
    for inst in instances {
        let fh = assemble_factored_hessian(&inst.b, &inst.a, &inst.loss)?;
        let rho = fh.spectra.balance_ratio();
        let (lo_h, hi_h) = (inst.loss.lambda_min(), inst.loss.lambda_max());
        let lower = lo_h * rho / hi_h;
        let upper = hi_h * rho / lo_h;
        let violated = !(fh.kappa >= lower * (1.0 - slack) && fh.kappa <= upper * (1.0 + slack));
        rows.push(Lemma1Row {
            seed: inst.seed,
            shape: (inst.b.rows(), inst.a.cols(), inst.b.cols()),
            kappa: fh.kappa,
            lower,
            upper,
            violated,
        });
    }
    rows.sort_by_key(|r| r.seed);
    Ok(Lemma1Report { slack, rows })
}

/// `(σmax^{2α} + σmax^{2−2α}) / (σmin^{2α} + σmin^{2−2α})` for each `α`.
pub fn alpha_balance_sweep(w: &Matrix, alphas: &[f64]) -> Result<Vec<f64>> {
    let svd = thin_svd(w)?;
    let smax = svd.sigma[0];
    let smin = *svd.sigma.last().expect("non-empty spectrum");
    if smin <= 1e-12 * smax.max(f64::MIN_POSITIVE) {
        return Err(invalid(
            "smallest singular value is zero; balance ratio undefined",
        ));
    }
    Ok(alpha_ratios(smax, smin, alphas))
}

pub fn alpha_ratios(smax: f64, smin: f64, alphas: &[f64]) -> Vec<f64> {
    alphas
        .iter()
        .map(|&al| {
            (smax.powf(2.0 * al) + smax.powf(2.0 - 2.0 * al))
                / (smin.powf(2.0 * al) + smin.powf(2.0 - 2.0 * al))
        })
        .collect()
}

/// `B = UΣ^α`, `A = Σ^{1−α}Vᵀ` from the thin SVD of `w`, truncated to rank `r`.
pub fn alpha_factorization(w: &Matrix, r: usize, alpha: f64) -> Result<(Matrix, Matrix)> {
    let svd = thin_svd(w)?;
    if r == 0 || r > svd.sigma.len() {
        return Err(Error::Rank {
            rank: r,
            rows: w.rows(),
            cols: w.cols(),
        });
    }
    let (m, n) = w.shape();
    let b = Matrix::from_fn(m, r, |i, k| svd.u[(i, k)] * svd.sigma[k].powf(alpha));
    let a = Matrix::from_fn(r, n, |k, j| svd.sigma[k].powf(1.0 - alpha) * svd.v[(j, k)]);
    Ok((b, a))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_one_isotropic_closed_form() {
        // b = (1, 0)ᵀ, a = (1, 0): AᵀA = diag(1, 0), BBᵀ = diag(1, 0);
        // spectrum of the Kronecker sum is {2, 1, 1, 0}
        let b = Matrix::from_rows(&[vec![1.0], vec![0.0]]);
        let a = Matrix::from_rows(&[vec![1.0, 0.0]]);
        let loss = QuadraticLoss::isotropic(1.0, b.matmul(&a).unwrap()).unwrap();
        let fh = assemble_factored_hessian(&b, &a, &loss).unwrap();
        assert!((fh.lambda_max - 2.0).abs() < 1e-12);
        assert!(fh.lambda_min.abs() < 1e-12);
        assert!(fh.kappa.is_infinite());
    }

    #[test]
    fn square_isotropic_matches_balance_ratio() {
        let mut rng = SeededRng::new(8);
        let b = kaiming_uniform_init(2, 2, &mut rng).unwrap();
        let a = kaiming_uniform_init(2, 2, &mut rng).unwrap();
        let loss = QuadraticLoss::isotropic(3.0, b.matmul(&a).unwrap()).unwrap();
        let fh = assemble_factored_hessian(&b, &a, &loss).unwrap();
        assert!((fh.kappa - fh.spectra.balance_ratio()).abs() <= 1e-9 * fh.kappa);
    }

    #[test]
    fn kronecker_matches_finite_differences() {
        for seed in 0..5 {
            let inst = Lemma1Instance::random(seed).unwrap();
            let exact = parameter_hessian(&inst.b, &inst.a, &inst.loss).unwrap();
            let j = factor_jacobian(&inst.b, &inst.a).unwrap();
            let gauss_newton = j
                .t_matmul(&inst.loss.hessian().matmul(&j).unwrap())
                .unwrap();
            assert!(exact.max_abs_diff(&gauss_newton) < 1e-12);
            let fd = finite_difference_hessian(&inst.b, &inst.a, &inst.loss, 1e-4).unwrap();
            assert!(
                exact.max_abs_diff(&fd) <= 1e-6,
                "seed {seed}: {}",
                exact.max_abs_diff(&fd)
            );
        }
    }

    #[test]
    fn off_stationary_hessian_matches_finite_differences() {
        let mut rng = SeededRng::new(3);
        let b = kaiming_uniform_init(3, 2, &mut rng).unwrap();
        let a = kaiming_uniform_init(2, 2, &mut rng).unwrap();
        let target = kaiming_uniform_init(3, 2, &mut rng).unwrap();
        let loss = QuadraticLoss::random(target, 0.5, 2.0, &mut rng).unwrap();
        let exact = parameter_hessian(&b, &a, &loss).unwrap();
        let fd = finite_difference_hessian(&b, &a, &loss, 1e-4).unwrap();
        assert!(exact.max_abs_diff(&fd) <= 1e-6);
    }

    #[test]
    fn bounds_collapse_for_isotropic_loss() {
        let mut rng = SeededRng::new(5);
        let b = kaiming_uniform_init(3, 3, &mut rng).unwrap();
        let a = kaiming_uniform_init(3, 3, &mut rng).unwrap();
        let loss = QuadraticLoss::isotropic(2.0, b.matmul(&a).unwrap()).unwrap();
        let inst = Lemma1Instance {
            seed: 0,
            b,
            a,
            loss,
        };
        let report = verify_lemma1_bounds(&[inst], 1e-8).unwrap();
        let row = &report.rows[0];
        assert!((row.lower - row.upper).abs() <= 1e-12 * row.upper);
        assert!((row.kappa - row.upper).abs() <= 1e-8 * row.upper);
    }

    #[test]
    fn sweep_hand_values() {
        let w = Matrix::diag(&[4.0, 1.0]);
        let r = alpha_balance_sweep(&w, &[0.0, 0.25, 0.5, 0.75, 1.0]).unwrap();
        assert!((r[0] - 8.5).abs() < 1e-12 && (r[4] - 8.5).abs() < 1e-12);
        assert!((r[2] - 4.0).abs() < 1e-12);
        assert!(r[1] > r[2] && r[3] > r[2]);
        let flat = alpha_balance_sweep(&Matrix::identity(3).scale(2.0), &[0.1, 0.6]).unwrap();
        assert!(flat.iter().all(|x| (x - 1.0).abs() < 1e-12));
        assert!(alpha_balance_sweep(&Matrix::diag(&[1.0, 0.0]), &[0.5]).is_err());
    }

    #[test]
    fn non_pd_loss_rejected() {
        let h = Matrix::diag(&[1.0, -1.0]);
        assert!(QuadraticLoss::new(h, Matrix::zeros(2, 1)).is_err());
    }
}
