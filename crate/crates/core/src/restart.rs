//! Periodic restart events: rebalancing of low-rank factors, optimizer
//! moment resets, and a learning-rate re-warmup.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{thin_svd, Matrix};
use crate::optim::{LrSchedule, MomentumReset};
use crate::params::Parameterization;
use crate::theory::{assemble_factored_hessian, QuadraticLoss};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct RestartPolicy {
    pub period: usize,
    pub apply_refactor: bool,
    pub apply_momentum_reset: bool,
    pub rewarmup_steps: usize,
    /// Also restart the bias-correction counters on reset.
    pub reset_counter: bool,
}

impl Default for RestartPolicy {
    fn default() -> Self {
        Self {
            period: 200,
            apply_refactor: true,
            apply_momentum_reset: true,
            rewarmup_steps: 50,
            reset_counter: true,
        }
    }
}

impl RestartPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.period == 0 {
            return Err(invalid("restart period must be ≥ 1"));
        }
        Ok(())
    }

    pub fn is_due(&self, step: usize) -> bool {
        step > 0 && self.period > 0 && step.is_multiple_of(self.period)
    }

    /// Whether any of the two techniques is switched on.
    pub fn is_active(&self) -> bool {
        self.apply_refactor || self.apply_momentum_reset
    }
}

/// `(U_r√Σ_r, √Σ_r V_rᵀ)` from the SVD of `b·a`. Null directions get zero
/// columns and rows.
pub fn refactor_pair(b: &Matrix, a: &Matrix) -> Result<(Matrix, Matrix)> {
    b.ensure_finite()?;
    a.ensure_finite()?;
    let r = b.cols();
    a.ensure_shape("refactor_pair", (r, a.cols()))?;
    let w = b.matmul(a)?;
    let svd = thin_svd(&w)?;
    let (m, n) = w.shape();
    let root: Vec<f64> = (0..r)
        .map(|k| svd.sigma.get(k).map_or(0.0, |s| s.sqrt()))
        .collect();
    let k = svd.sigma.len();
    let b2 = Matrix::from_fn(
        m,
        r,
        |i, j| if j < k { svd.u[(i, j)] * root[j] } else { 0.0 },
    );
    let a2 = Matrix::from_fn(
        r,
        n,
        |i, j| if i < k { root[i] * svd.v[(j, i)] } else { 0.0 },
    );
    Ok((b2, a2))
}

/// Rebalances the `(B, A)` pair in place. Returns `false` for dense weights,
/// which have nothing to rebalance.
pub fn refactor_parameterization(p: &mut Parameterization) -> Result<bool> {
    match p.factors_mut() {
        Some((b, a)) => {
            let (b2, a2) = refactor_pair(b, a)?;
            *b = b2;
            *a = a2;
            Ok(true)
        }
        None => Ok(false),
    }
}

/// Mutable views of a run's state touched by a restart.
pub struct RestartTargets<'a> {
    pub layers: Vec<&'a mut Parameterization>,
    /// Moments belonging to `B` and `A` tensors.
    pub factor_states: Vec<&'a mut dyn MomentumReset>,
    /// All other moments (embeddings, dense weights, sparse values).
    pub other_states: Vec<&'a mut dyn MomentumReset>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct RestartOutcome {
    pub refactored: usize,
    pub states_reset: usize,
}

/// Applies one restart at `step`. Refactoring always invalidates the factor
/// moments, so those are reset whenever layers are refactored; the full
/// momentum reset additionally clears every other state.
pub fn restart_apply(
    policy: &RestartPolicy,
    step: usize,
    targets: RestartTargets<'_>,
    schedule: &mut LrSchedule,
) -> Result<RestartOutcome> {
    policy.validate()?;
    if !policy.is_due(step) {
        return Err(invalid(format!(
            "restart requested at step {step}, period {}",
            policy.period
        )));
    }
    let mut out = RestartOutcome::default();
    if policy.apply_refactor {
        for layer in targets.layers {
            if refactor_parameterization(layer)? {
                out.refactored += 1;
            } else {
                log::warn!("skipping refactorization of a dense weight at step {step}");
            }
        }
    }
    let reset_factors =
        policy.apply_momentum_reset || (policy.apply_refactor && out.refactored > 0);
    if reset_factors {
        for s in targets.factor_states {
            s.reset_momentum(policy.reset_counter);
            out.states_reset += 1;
        }
    }
    if policy.apply_momentum_reset {
        for s in targets.other_states {
            s.reset_momentum(policy.reset_counter);
            out.states_reset += 1;
        }
    }
    schedule.rewarmup_steps = policy.rewarmup_steps;
    schedule.add_restart(step);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConditionProbe {
    pub kappa_before: f64,
    pub kappa_after: f64,
}

impl ConditionProbe {
    /// `κ_after / κ_before`; undefined (NaN) when both are infinite.
    pub fn ratio(&self) -> f64 {
        self.kappa_after / self.kappa_before
    }
}

/// Conditioning of the factored Hessian at `(b, a)` and at its rebalanced
/// pair, for a quadratic loss whose minimizer is `b·a`.
pub fn condition_improvement_probe(
    b: &Matrix,
    a: &Matrix,
    probe_hessian: &Matrix,
) -> Result<ConditionProbe> {
    let loss = QuadraticLoss::new(probe_hessian.clone(), b.matmul(a)?)?;
    let before = assemble_factored_hessian(b, a, &loss)?.kappa;
    let (b2, a2) = refactor_pair(b, a)?;
    let after = assemble_factored_hessian(&b2, &a2, &loss)?.kappa;
    Ok(ConditionProbe {
        kappa_before: before,
        kappa_after: after,
    })
}
