//! Convergence of heavy-ball SGD with and without momentum resets on convex
//! finite sums, checked against the corresponding expectation bounds.

use serde::Serialize;

use crate::error::{invalid, Result};
use crate::linalg::{symmetric_eigen, thin_svd, Matrix, SeededRng};
use crate::optim::{sgdmr_run, CounterMode, SgdmTrace, SgdmrSchedule, StochasticProblem};

use super::lemma::symmetrize;

/// `f(w) = (1/n) Σᵢ ℓᵢ(w)` with convex, `L`-smooth components.
#[derive(Debug, Clone)]
pub enum FiniteSumProblem {
    /// `ℓᵢ(w) = ½(xᵢᵀw − yᵢ)²`, `w` a `d × 1` column.
    LeastSquares { x: Matrix, y: Vec<f64> },
    /// A single component `½(w − c)ᵀQ(w − c)` with `Q` SPD.
    Quadratic { q: Matrix, c: Matrix },
}

impl FiniteSumProblem {
    pub fn least_squares(x: Matrix, y: Vec<f64>) -> Result<Self> {
        if x.rows() != y.len() || x.rows() == 0 {
            return Err(invalid(
                "design rows and targets must match and be non-empty",
            ));
        }
        Ok(Self::LeastSquares { x, y })
    }

    /// Rows are the first `n` rows of a random orthogonal `d × d` matrix and
    /// targets are realizable: `y = X w_true` with Gaussian `w_true`.
    pub fn orthonormal_least_squares(n: usize, d: usize, rng: &mut SeededRng) -> Result<Self> {
        if n == 0 || n > d {
            return Err(invalid(format!("need 1 ≤ n ≤ d, got n={n}, d={d}")));
        }
        let g = Matrix::from_fn(d, d, |_, _| rng.normal());
        let q = thin_svd(&g)?.u;
        let x = q.leading_columns(n).transpose();
        let w_true = Matrix::from_fn(d, 1, |_, _| rng.normal());
        let y = x.matmul(&w_true)?.into_vec();
        Self::least_squares(x, y)
    }

    /// Gaussian design with realizable targets.
    pub fn gaussian_least_squares(n: usize, d: usize, rng: &mut SeededRng) -> Result<Self> {
        let x = Matrix::from_fn(n, d, |_, _| rng.normal() / (d as f64).sqrt());
        let w_true = Matrix::from_fn(d, 1, |_, _| rng.normal());
        let y = x.matmul(&w_true)?.into_vec();
        Self::least_squares(x, y)
    }

    pub fn quadratic(q: Matrix, c: Matrix) -> Result<Self> {
        let d = c.rows();
        q.ensure_shape("quadratic problem", (d, d))?;
        if c.cols() != 1 {
            return Err(invalid("quadratic centre must be a column"));
        }
        if symmetric_eigen(&q)?.min() <= 0.0 {
            return Err(invalid("quadratic problem needs an SPD matrix"));
        }
        Ok(Self::Quadratic { q, c })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::LeastSquares { x, .. } => x.cols(),
            Self::Quadratic { c, .. } => c.rows(),
        }
    }

    /// A common smoothness constant of all components.
    pub fn lipschitz(&self) -> Result<f64> {
        Ok(match self {
            Self::LeastSquares { x, .. } => (0..x.rows())
                .map(|i| x.row(i).iter().map(|v| v * v).sum::<f64>())
                .fold(0.0, f64::max),
            Self::Quadratic { q, .. } => symmetric_eigen(q)?.max(),
        })
    }

    /// Minimizer closest to `w0` and the optimal value.
    pub fn solution(&self, w0: &Matrix) -> Result<(Matrix, f64)> {
        match self {
            Self::Quadratic { c, .. } => Ok((c.clone(), 0.0)),
            Self::LeastSquares { x, y } => {
                // w* = w0 + Xᵀ(XXᵀ)⁺(y − Xw0)
                let gram = symmetrize(&x.matmul_t(x)?);
                let eig = symmetric_eigen(&gram)?;
                let tol = 1e-12 * eig.max();
                let pinv = eig.spectral_map(|l| if l > tol { 1.0 / l } else { 0.0 });
                let resid = Matrix::from_vec(y.len(), 1, y.clone())?.sub(&x.matmul(w0)?)?;
                let mut w = w0.clone();
                w.add_assign(&x.t_matmul(&pinv.matmul(&resid)?)?)?;
                let f = self.objective(&w);
                Ok((w, f))
            }
        }
    }
}

impl StochasticProblem for FiniteSumProblem {
    fn shape(&self) -> (usize, usize) {
        (self.dim(), 1)
    }

    fn n_components(&self) -> usize {
        match self {
            Self::LeastSquares { x, .. } => x.rows(),
            Self::Quadratic { .. } => 1,
        }
    }

    fn component_gradient(&self, i: usize, w: &Matrix) -> Result<Matrix> {
        match self {
            Self::LeastSquares { x, y } => {
                let xi = x.row(i);
                let r = xi.iter().zip(w.as_slice()).map(|(a, b)| a * b).sum::<f64>() - y[i];
                Matrix::from_vec(xi.len(), 1, xi.iter().map(|v| v * r).collect())
            }
            Self::Quadratic { q, c } => q.matmul(&w.sub(c)?),
        }
    }

    fn objective(&self, w: &Matrix) -> f64 {
        match self {
            Self::LeastSquares { x, y } => {
                let pred = x.matmul(w).expect("shape checked by caller");
                pred.as_slice()
                    .iter()
                    .zip(y)
                    .map(|(p, t)| 0.5 * (p - t).powi(2))
                    .sum::<f64>()
                    / y.len() as f64
            }
            Self::Quadratic { q, c } => {
                let d = w.sub(c).expect("shape checked by caller");
                let qd = q.matmul(&d).expect("shape checked by caller");
                0.5 * d
                    .as_slice()
                    .iter()
                    .zip(qd.as_slice())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExperimentSettings {
    pub eta: f64,
    pub t_inner: usize,
    pub k_blocks: usize,
    pub counter: CounterMode,
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub sgdm_subopt: f64,
    pub sgdmr_subopt: f64,
    /// `‖W^{kT} − W*‖²` of the restarted run, `k = 0..K−1`.
    pub block_start_sq_dist: Vec<f64>,
    /// Same at the block starts `k(T+1)` of a run with blocks of `T + 1` steps.
    pub proof_block_start_sq_dist: Vec<f64>,
    pub proof_subopt: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub settings: ExperimentSettings,
    pub lipschitz: f64,
    /// Bound constant: max over all runs and iterates of the sampled squared
    /// gradient norm and of `E_i‖∇ℓ_i‖²`.
    pub g_sq: f64,
    pub initial_sq_dist: f64,
    pub sgdm_mean_subopt: f64,
    pub sgdm_bound: f64,
    pub sgdmr_mean_subopt: f64,
    pub sgdmr_bound: f64,
    /// Restarted runs with blocks of `T + 1` steps, evaluated at `W^{K(T+1)}`.
    pub proof_mean_subopt: f64,
    pub proof_bound: f64,
    pub theorem1_holds: bool,
    pub theorem2_holds: bool,
    pub proof_indexing_holds: bool,
    /// Seeds where the restarted run ended strictly lower.
    pub sgdmr_wins: usize,
    /// `min_k ‖W^{kT} − W*‖/‖W⁰ − W*‖ · √(kT)` over `k ≥ 1`, seed-averaged.
    pub distance_decay_ratio: f64,
    pub seeds: Vec<SeedOutcome>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn max_expected_sq(problem: &FiniteSumProblem, trace: &SgdmTrace) -> Result<f64> {
    let mut g = trace.max_sampled_sq_norm;
    for w in &trace.iterates {
        g = g.max(problem.mean_sq_gradient_norm(w)?);
    }
    Ok(g)
}

fn sq_dist(a: &Matrix, b: &Matrix) -> f64 {
    a.sub(b).expect("same shape").frobenius_norm().powi(2)
}

/// `Σ_k d_k/(η(k+1)(T+1)) + Σ_k 2ηG²/(k+1)`.
pub fn restart_bound(block_sq_dist: &[f64], eta: f64, t_inner: usize, g_sq: f64) -> f64 {
    block_sq_dist
        .iter()
        .enumerate()
        .map(|(k, d)| {
            d / (eta * (k as f64 + 1.0) * (t_inner as f64 + 1.0))
                + 2.0 * eta * g_sq / (k as f64 + 1.0)
        })
        .sum()
}

/// `‖W⁰ − W*‖²/(η(T+1)) + 2ηG²`.
pub fn sgdm_bound(initial_sq_dist: f64, eta: f64, steps: usize, g_sq: f64) -> f64 {
    initial_sq_dist / (eta * (steps as f64 + 1.0)) + 2.0 * eta * g_sq
}

/// Paired runs of SGD-M (`KT` steps) and SGD-M-R (`K` blocks of `T`) from
/// `w0`; both see the same component sequence for a given seed.
pub fn convergence_experiment(
    problem: &FiniteSumProblem,
    w0: &Matrix,
    settings: ExperimentSettings,
    seeds: &[u64],
) -> Result<ConvergenceReport> {
    if seeds.is_empty() {
        return Err(invalid("at least one seed required"));
    }
    let lipschitz = problem.lipschitz()?;
    let sched = SgdmrSchedule::new(settings.eta, settings.t_inner, settings.k_blocks)?
        .with_counter(settings.counter);
    sched.check_smoothness(lipschitz)?;
    let plain = SgdmrSchedule::single_block(settings.eta, sched.total_steps())?;
    let proof_sched = SgdmrSchedule::new(settings.eta, settings.t_inner + 1, settings.k_blocks)?
        .with_counter(settings.counter);
    let (w_star, f_star) = problem.solution(w0)?;
    let d0 = sq_dist(w0, &w_star);
    let (t, k) = (settings.t_inner, settings.k_blocks);

    let mut g_sq: f64 = 0.0;
    let mut outcomes = Vec::with_capacity(seeds.len());
    let mut decay = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let a = sgdmr_run(problem, &plain, w0, &mut SeededRng::new(seed))?;
        let b = sgdmr_run(problem, &sched, w0, &mut SeededRng::new(seed))?;
        let c = sgdmr_run(problem, &proof_sched, w0, &mut SeededRng::new(seed))?;
        for tr in [&a, &b, &c] {
            g_sq = g_sq.max(max_expected_sq(problem, tr)?);
        }
        let starts: Vec<f64> = (0..k)
            .map(|kk| sq_dist(&b.iterates[kk * t], &w_star))
            .collect();
        if k > 1 && d0 > 0.0 {
            let r = (1..k)
                .map(|kk| (starts[kk] / d0).sqrt() * ((kk * t) as f64).sqrt())
                .fold(f64::INFINITY, f64::min);
            decay.push(r);
        }
        outcomes.push(SeedOutcome {
            seed,
            sgdm_subopt: problem.objective(a.last()) - f_star,
            sgdmr_subopt: problem.objective(b.last()) - f_star,
            proof_block_start_sq_dist: (0..k)
                .map(|kk| sq_dist(&c.iterates[kk * (t + 1)], &w_star))
                .collect(),
            proof_subopt: problem.objective(c.last()) - f_star,
            block_start_sq_dist: starts,
        });
    }
    outcomes.sort_by_key(|o| o.seed);

    let sgdm_mean = mean(outcomes.iter().map(|o| o.sgdm_subopt));
    let sgdmr_mean = mean(outcomes.iter().map(|o| o.sgdmr_subopt));
    let proof_mean = mean(outcomes.iter().map(|o| o.proof_subopt));
    let bound1 = sgdm_bound(d0, settings.eta, k * t, g_sq);
    let bound2 = mean(
        outcomes
            .iter()
            .map(|o| restart_bound(&o.block_start_sq_dist, settings.eta, t, g_sq)),
    );
    let bound_p = mean(
        outcomes
            .iter()
            .map(|o| restart_bound(&o.proof_block_start_sq_dist, settings.eta, t, g_sq)),
    );
    let wins = outcomes
        .iter()
        .filter(|o| o.sgdmr_subopt < o.sgdm_subopt)
        .count();
    Ok(ConvergenceReport {
        settings,
        lipschitz,
        g_sq,
        initial_sq_dist: d0,
        sgdm_mean_subopt: sgdm_mean,
        sgdm_bound: bound1,
        sgdmr_mean_subopt: sgdmr_mean,
        sgdmr_bound: bound2,
        proof_mean_subopt: proof_mean,
        proof_bound: bound_p,
        theorem1_holds: sgdm_mean <= bound1,
        theorem2_holds: sgdmr_mean <= bound2,
        proof_indexing_holds: proof_mean <= bound_p,
        sgdmr_wins: wins,
        distance_decay_ratio: if decay.is_empty() {
            f64::NAN
        } else {
            mean(decay.into_iter())
        },
        seeds: outcomes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn least_squares_solution_is_closest_minimizer() {
        let mut rng = SeededRng::new(1);
        let p = FiniteSumProblem::gaussian_least_squares(5, 9, &mut rng).unwrap();
        let w0 = Matrix::from_fn(9, 1, |_, _| rng.normal());
        let (w, f) = p.solution(&w0).unwrap();
        assert!(f < 1e-20);
        assert!(p.full_gradient(&w).unwrap().frobenius_norm() < 1e-10);
        // the displacement lies in the row space of X
        if let FiniteSumProblem::LeastSquares { x, .. } = &p {
            let delta = w.sub(&w0).unwrap();
            let svd = thin_svd(&x.transpose()).unwrap();
            let proj = svd.u.matmul(&svd.u.t_matmul(&delta).unwrap()).unwrap();
            assert!(proj.max_abs_diff(&delta) < 1e-10);
        }
    }

    #[test]
    fn orthonormal_design_has_unit_smoothness() {
        let p = FiniteSumProblem::orthonormal_least_squares(6, 10, &mut SeededRng::new(2)).unwrap();
        assert!((p.lipschitz().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn deterministic_quadratic_bounds() {
        let q = Matrix::diag(&[1.0, 0.5, 0.2]);
        let c = Matrix::from_rows(&[vec![1.0], vec![-2.0], vec![0.5]]);
        let p = FiniteSumProblem::quadratic(q, c).unwrap();
        let s = ExperimentSettings {
            eta: 0.25,
            t_inner: 100,
            k_blocks: 5,
            counter: CounterMode::Global,
        };
        let rep = convergence_experiment(&p, &Matrix::zeros(3, 1), s, &[0]).unwrap();
        assert!(rep.theorem1_holds && rep.theorem2_holds && rep.proof_indexing_holds);
        assert!(rep.sgdm_mean_subopt < 1e-2 * p.objective(&Matrix::zeros(3, 1)));
    }

    #[test]
    fn single_block_runs_coincide() {
        let p =
            FiniteSumProblem::orthonormal_least_squares(10, 20, &mut SeededRng::new(3)).unwrap();
        let s = ExperimentSettings {
            eta: 0.25,
            t_inner: 50,
            k_blocks: 1,
            counter: CounterMode::Global,
        };
        let rep = convergence_experiment(&p, &Matrix::zeros(20, 1), s, &[1, 2]).unwrap();
        for o in &rep.seeds {
            assert_eq!(o.sgdm_subopt, o.sgdmr_subopt);
        }
        assert!((rep.sgdmr_bound - rep.sgdm_bound).abs() <= 1e-12 * rep.sgdm_bound);
    }

    #[test]
    fn step_size_checked_against_smoothness() {
        let p = FiniteSumProblem::orthonormal_least_squares(4, 8, &mut SeededRng::new(4)).unwrap();
        let s = ExperimentSettings {
            eta: 0.3,
            t_inner: 10,
            k_blocks: 2,
            counter: CounterMode::Global,
        };
        assert!(convergence_experiment(&p, &Matrix::zeros(8, 1), s, &[0]).is_err());
    }
}
