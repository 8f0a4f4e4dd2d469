//! Undampened heavy-ball SGD and its periodically restarted variant.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{Matrix, SeededRng};

/// `M ← βM + g`, then `W ← W − γM`.
pub fn sgdm_step(
    m_buf: &mut Matrix,
    w: &mut Matrix,
    g: &Matrix,
    gamma: f64,
    beta: f64,
) -> Result<()> {
    g.ensure_shape("sgdm_step", w.shape())?;
    m_buf.ensure_shape("sgdm_step", w.shape())?;
    for ((mi, wi), &gi) in m_buf
        .as_mut_slice()
        .iter_mut()
        .zip(w.as_mut_slice())
        .zip(g.as_slice())
    {
        *mi = beta * *mi + gi;
        *wi -= gamma * *mi;
    }
    Ok(())
}

/// Which counter feeds the step-size and momentum rules after a reset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CounterMode {
    /// Iteration count since the start of the run (`t = kT + j`).
    #[default]
    Global,
    /// Count within the current block (`t = j`).
    PerBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdmrSchedule {
    pub eta: f64,
    /// Inner horizon: steps per block.
    pub t_inner: usize,
    /// Number of blocks (momentum resets).
    pub k_blocks: usize,
    pub counter: CounterMode,
}

impl SgdmrSchedule {
    pub fn new(eta: f64, t_inner: usize, k_blocks: usize) -> Result<Self> {
        if t_inner < 1 || k_blocks < 1 {
            return Err(invalid(format!(
                "need T, K ≥ 1, got T={t_inner}, K={k_blocks}"
            )));
        }
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(invalid(format!(
                "step parameter must be positive, got {eta}"
            )));
        }
        Ok(Self {
            eta,
            t_inner,
            k_blocks,
            counter: CounterMode::Global,
        })
    }

    /// Plain SGD-M for `steps` iterations: a single block.
    pub fn single_block(eta: f64, steps: usize) -> Result<Self> {
        Self::new(eta, steps, 1)
    }

    pub fn with_counter(mut self, counter: CounterMode) -> Self {
        self.counter = counter;
        self
    }

    /// Rejects `η > 1/(4L)`.
    pub fn check_smoothness(&self, lipschitz: f64) -> Result<()> {
        let limit = 1.0 / (4.0 * lipschitz);
        if self.eta > limit * (1.0 + 1e-12) {
            return Err(invalid(format!(
                "η = {} exceeds 1/(4L) = {limit} for L = {lipschitz}",
                self.eta
            )));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.t_inner * self.k_blocks
    }

    pub fn gamma(eta: f64, t: usize) -> f64 {
        2.0 * eta / (t as f64 + 3.0)
    }

    pub fn beta(t: usize) -> f64 {
        t as f64 / (t as f64 + 2.0)
    }

    /// `(γ, β)` for inner step `j` of block `k`.
    pub fn coefficients(&self, k: usize, j: usize) -> (f64, f64) {
        let t = match self.counter {
            CounterMode::Global => k * self.t_inner + j,
            CounterMode::PerBlock => j,
        };
        (Self::gamma(self.eta, t), Self::beta(t))
    }
}

/// A finite sum of component losses, sampled uniformly.
pub trait StochasticProblem {
    fn shape(&self) -> (usize, usize);
    fn n_components(&self) -> usize;
    fn component_gradient(&self, i: usize, w: &Matrix) -> Result<Matrix>;
    /// The objective being minimized (mean of the components).
    fn objective(&self, w: &Matrix) -> f64;

    fn full_gradient(&self, w: &Matrix) -> Result<Matrix> {
        let (m, n) = self.shape();
        let mut acc = Matrix::zeros(m, n);
        let count = self.n_components();
        for i in 0..count {
            acc.add_assign(&self.component_gradient(i, w)?)?;
        }
        acc.scale_in_place(1.0 / count as f64);
        Ok(acc)
    }

    /// `E_i ‖∇ℓ_i(w)‖²` under uniform sampling.
    fn mean_sq_gradient_norm(&self, w: &Matrix) -> Result<f64> {
        let count = self.n_components();
        let mut sum = 0.0;
        for i in 0..count {
            sum += self.component_gradient(i, w)?.frobenius_norm().powi(2);
        }
        Ok(sum / count as f64)
    }
}

#[derive(Debug, Clone)]
pub struct SgdmTrace {
    /// `W⁰, W¹, …, W^{KT}`.
    pub iterates: Vec<Matrix>,
    /// Largest squared norm among the sampled stochastic gradients.
    pub max_sampled_sq_norm: f64,
    /// Momentum norm right after each step.
    pub momentum_norms: Vec<f64>,
}

impl SgdmTrace {
    pub fn last(&self) -> &Matrix {
        self.iterates.last().expect("trace holds W⁰")
    }
}

/// Runs `K` blocks of `T` momentum steps, zeroing the momentum at the start
/// of each block. Component indices are drawn from `rng` in step order, so
/// runs with equal seeds see the same sample sequence regardless of `K`.
pub fn sgdmr_run<P: StochasticProblem + ?Sized>(
    problem: &P,
    sched: &SgdmrSchedule,
    w0: &Matrix,
    rng: &mut SeededRng,
) -> Result<SgdmTrace> {
    w0.ensure_shape("sgdmr_run", problem.shape())?;
    let (m, n) = problem.shape();
    let mut w = w0.clone();
    let mut buf = Matrix::zeros(m, n);
    let steps = sched.total_steps();
    let mut iterates = Vec::with_capacity(steps + 1);
    let mut momentum_norms = Vec::with_capacity(steps);
    iterates.push(w.clone());
    let mut max_sq: f64 = 0.0;
    for k in 0..sched.k_blocks {
        buf.fill(0.0);
        for j in 0..sched.t_inner {
            let i = rng.below(problem.n_components());
            let g = problem.component_gradient(i, &w)?;
            max_sq = max_sq.max(g.frobenius_norm().powi(2));
            let (gamma, beta) = sched.coefficients(k, j);
            sgdm_step(&mut buf, &mut w, &g, gamma, beta)?;
            w.ensure_finite()?;
            momentum_norms.push(buf.frobenius_norm());
            iterates.push(w.clone());
        }
    }
    Ok(SgdmTrace {
        iterates,
        max_sampled_sq_norm: max_sq,
        momentum_norms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(x: f64) -> Matrix {
        Matrix::from_vec(1, 1, vec![x]).unwrap()
    }

    /// ℓ_i(w) = ½(w − c_i)².
    struct Scalars(Vec<f64>);

    impl StochasticProblem for Scalars {
        fn shape(&self) -> (usize, usize) {
            (1, 1)
        }
        fn n_components(&self) -> usize {
            self.0.len()
        }
        fn component_gradient(&self, i: usize, w: &Matrix) -> Result<Matrix> {
            Ok(scalar(w[(0, 0)] - self.0[i]))
        }
        fn objective(&self, w: &Matrix) -> f64 {
            self.0
                .iter()
                .map(|c| 0.5 * (w[(0, 0)] - c).powi(2))
                .sum::<f64>()
                / self.0.len() as f64
        }
    }

    #[test]
    fn plain_gradient_step() {
        let mut w = scalar(3.0);
        let mut m = scalar(0.0);
        let g = w.clone();
        sgdm_step(&mut m, &mut w, &g, 1.0, 0.0).unwrap();
        assert_eq!(w[(0, 0)], 0.0);
    }

    #[test]
    fn two_steps_by_hand() {
        let mut w = scalar(1.0);
        let mut m = scalar(0.0);
        sgdm_step(&mut m, &mut w, &scalar(1.0), 0.1, 0.5).unwrap();
        assert!((m[(0, 0)] - 1.0).abs() < 1e-15 && (w[(0, 0)] - 0.9).abs() < 1e-15);
        sgdm_step(&mut m, &mut w, &scalar(1.0), 0.1, 0.5).unwrap();
        assert!((m[(0, 0)] - 1.5).abs() < 1e-15 && (w[(0, 0)] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn schedule_monotonicity_and_validation() {
        for t in 0..100 {
            assert!(SgdmrSchedule::gamma(0.1, t + 1) < SgdmrSchedule::gamma(0.1, t));
            assert!((0.0..1.0).contains(&SgdmrSchedule::beta(t)));
        }
        assert!(SgdmrSchedule::new(0.1, 0, 1).is_err());
        assert!(SgdmrSchedule::new(0.1, 1, 0).is_err());
        let s = SgdmrSchedule::new(0.25, 10, 2).unwrap();
        assert!(s.check_smoothness(1.0).is_ok());
        assert!(s.check_smoothness(2.0).is_err());
    }

    #[test]
    fn single_block_matches_manual_loop() {
        let p = Scalars(vec![1.0, -2.0, 0.5]);
        let sched = SgdmrSchedule::single_block(0.2, 30).unwrap();
        let trace = sgdmr_run(&p, &sched, &scalar(4.0), &mut SeededRng::new(5)).unwrap();

        let mut rng = SeededRng::new(5);
        let mut w = scalar(4.0);
        let mut m = scalar(0.0);
        for t in 0..30 {
            let i = rng.below(3);
            let g = p.component_gradient(i, &w).unwrap();
            sgdm_step(
                &mut m,
                &mut w,
                &g,
                SgdmrSchedule::gamma(0.2, t),
                SgdmrSchedule::beta(t),
            )
            .unwrap();
        }
        assert_eq!(trace.last(), &w);
        assert_eq!(trace.iterates.len(), 31);
    }

    #[test]
    fn unit_blocks_are_plain_sgd() {
        let p = Scalars(vec![1.0, 3.0]);
        let sched = SgdmrSchedule::new(0.2, 1, 12).unwrap();
        let trace = sgdmr_run(&p, &sched, &scalar(0.0), &mut SeededRng::new(8)).unwrap();
        let mut rng = SeededRng::new(8);
        let mut w = 0.0;
        for t in 0..12 {
            let i = rng.below(2);
            w -= SgdmrSchedule::gamma(0.2, t) * (w - p.0[i]);
            assert!(
                (trace.momentum_norms[t] - (trace.iterates[t][(0, 0)] - p.0[i]).abs()).abs()
                    < 1e-15
            );
        }
        assert!((trace.last()[(0, 0)] - w).abs() < 1e-15);
    }

    #[test]
    fn per_block_counter_restarts_schedule() {
        let s = SgdmrSchedule::new(0.1, 5, 3)
            .unwrap()
            .with_counter(CounterMode::PerBlock);
        assert_eq!(s.coefficients(2, 0), (SgdmrSchedule::gamma(0.1, 0), 0.0));
        let g = SgdmrSchedule::new(0.1, 5, 3).unwrap();
        assert_eq!(
            g.coefficients(2, 1),
            (SgdmrSchedule::gamma(0.1, 11), SgdmrSchedule::beta(11))
        );
    }
}
