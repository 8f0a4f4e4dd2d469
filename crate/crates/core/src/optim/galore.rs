//! Gradient low-rank projection (GaLore) and its full-rank correction (Fira).
//!
//! The weight is viewed in an orientation with at least as many rows as
//! columns; a gradient `G` (`m × n`, `m ≥ n`) is projected to `R = PᵀG`
//! with `P` the leading `r` left singular vectors of a recent gradient, and
//! Adam moments are kept for `R` only (`r × n`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{first_r_left_singular_vectors, Matrix};
use crate::optim::adam::AdamHparams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecaySpace {
    /// `w ← w − lr·wd·w`.
    #[default]
    Full,
    /// `w ← w − lr·wd·PPᵀw`, decay restricted to the current subspace.
    Projected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaLoreState {
    /// `long × r`, column-orthonormal; `None` before the first refresh.
    pub p: Option<Matrix>,
    pub m_low: Matrix,
    pub v_low: Matrix,
    pub rank: usize,
    pub update_period: usize,
    /// Bias-correction counter.
    pub t: u64,
    /// Steps taken, drives projection refresh; untouched by momentum reset.
    pub steps: u64,
    pub decay_space: DecaySpace,
    long: usize,
    transposed: bool,
    fixed_projection: bool,
}

impl GaLoreState {
    /// State for an `m × n` weight.
    pub fn new(m: usize, n: usize, rank: usize, update_period: usize) -> Result<Self> {
        if rank == 0 || rank > m.min(n) {
            return Err(Error::Rank {
                rank,
                rows: m,
                cols: n,
            });
        }
        if update_period == 0 {
            return Err(Error::InvalidArgument(
                "projection update period must be ≥ 1".into(),
            ));
        }
        let transposed = m < n;
        let short = m.min(n);
        Ok(Self {
            p: None,
            m_low: Matrix::zeros(rank, short),
            v_low: Matrix::zeros(rank, short),
            rank,
            update_period,
            t: 0,
            steps: 0,
            decay_space: DecaySpace::Full,
            long: m.max(n),
            transposed,
            fixed_projection: false,
        })
    }

    /// State whose projection is pinned to `p` and never refreshed.
    pub fn with_fixed_projection(m: usize, n: usize, p: Matrix) -> Result<Self> {
        let rank = p.cols();
        let mut s = Self::new(m, n, rank, 1)?;
        let long = m.max(n);
        p.ensure_shape("fixed projection", (long, rank))?;
        s.p = Some(p);
        s.fixed_projection = true;
        Ok(s)
    }

    /// Whether gradients are transposed into the tall orientation.
    pub fn is_transposed(&self) -> bool {
        self.transposed
    }

    /// Persistent optimizer values: projection plus the two low-rank moments.
    pub fn element_count(&self) -> usize {
        self.long * self.rank + self.m_low.len() + self.v_low.len()
    }

    fn orient(&self, x: &Matrix) -> Matrix {
        if self.transposed {
            x.transpose()
        } else {
            x.clone()
        }
    }

    fn unorient(&self, x: Matrix) -> Matrix {
        if self.transposed {
            x.transpose()
        } else {
            x
        }
    }
}

/// Quantities from one projected Adam step, in the tall orientation.
#[derive(Debug, Clone)]
pub struct ProjectedStep {
    /// Oriented gradient `G`.
    pub g: Matrix,
    /// `R = PᵀG`.
    pub r: Matrix,
    /// Adam direction `m̂/(√v̂ + ε)` in the projected space.
    pub direction: Matrix,
    /// `P · direction`.
    pub lifted: Matrix,
}

impl ProjectedStep {
    /// `G − PR`, the part of the gradient outside the subspace.
    pub fn residual(&self, p: &Matrix) -> Matrix {
        let pr = p.matmul(&self.r).expect("projection shapes");
        self.g.sub(&pr).expect("projection shapes")
    }
}

fn projected_adam(state: &mut GaLoreState, hp: &AdamHparams, g: &Matrix) -> Result<ProjectedStep> {
    g.ensure_finite()?;
    let g = state.orient(g);
    let refresh = !state.fixed_projection && state.steps.is_multiple_of(state.update_period as u64);
    if refresh || state.p.is_none() {
        state.p = Some(first_r_left_singular_vectors(&g, state.rank)?);
    }
    state.steps += 1;
    let p = state.p.as_ref().expect("projection set above");
    let r = p.t_matmul(&g)?;
    state.t += 1;
    let (c1, c2) = hp.corrections(state.t);
    let mut direction = Matrix::zeros(r.rows(), r.cols());
    for (((d, &ri), mi), vi) in direction
        .as_mut_slice()
        .iter_mut()
        .zip(r.as_slice())
        .zip(state.m_low.as_mut_slice())
        .zip(state.v_low.as_mut_slice())
    {
        *mi = hp.beta1 * *mi + (1.0 - hp.beta1) * ri;
        *vi = hp.beta2 * *vi + (1.0 - hp.beta2) * ri * ri;
        *d = (*mi / c1) / ((*vi / c2).sqrt() + hp.eps);
    }
    let lifted = p.matmul(&direction)?;
    Ok(ProjectedStep {
        g,
        r,
        direction,
        lifted,
    })
}

fn apply_update(
    state: &GaLoreState,
    hp: &AdamHparams,
    lr: f64,
    w: &mut Matrix,
    oriented_update: Matrix,
) -> Result<()> {
    let update = state.unorient(oriented_update);
    let decay = match state.decay_space {
        DecaySpace::Full => w.clone(),
        DecaySpace::Projected => {
            let p = state.p.as_ref().expect("projection set");
            let wo = state.orient(w);
            let proj = p.matmul(&p.t_matmul(&wo)?)?;
            state.unorient(proj)
        }
    };
    w.axpy(-lr, &update)?;
    w.axpy(-lr * hp.weight_decay, &decay)?;
    Ok(())
}

pub fn galore_step(
    state: &mut GaLoreState,
    hp: &AdamHparams,
    lr: f64,
    w: &mut Matrix,
    g: &Matrix,
) -> Result<ProjectedStep> {
    g.ensure_shape("galore_step", w.shape())?;
    let step = projected_adam(state, hp, g)?;
    apply_update(state, hp, lr, w, step.lifted.clone())?;
    Ok(step)
}

/// Rule for the scalar weighting Fira's orthogonal residual term.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhiMode {
    /// `‖m̂/(√v̂+ε)‖_F / ‖R‖_F`: the Adam rescaling of the projected gradient,
    /// transferred to the residual.
    #[default]
    NormRatio,
    /// A constant multiplier.
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiraState {
    pub galore: GaLoreState,
    pub phi_mode: PhiMode,
    /// The single extra scalar kept between steps: the most recent φ.
    pub last_phi: f64,
}

impl FiraState {
    pub fn new(m: usize, n: usize, rank: usize, update_period: usize) -> Result<Self> {
        Ok(Self {
            galore: GaLoreState::new(m, n, rank, update_period)?,
            phi_mode: PhiMode::NormRatio,
            last_phi: 0.0,
        })
    }

    pub fn from_galore(galore: GaLoreState) -> Self {
        Self {
            galore,
            phi_mode: PhiMode::NormRatio,
            last_phi: 0.0,
        }
    }

    pub fn element_count(&self) -> usize {
        self.galore.element_count() + 1
    }
}

/// `φ(R)` under the given mode; zero when `‖R‖_F = 0`.
pub fn fira_phi(mode: PhiMode, r: &Matrix, direction: &Matrix) -> f64 {
    let rn = r.frobenius_norm();
    if rn == 0.0 {
        return 0.0;
    }
    match mode {
        PhiMode::NormRatio => direction.frobenius_norm() / rn,
        PhiMode::Constant(c) => c,
    }
}

/// GaLore step plus `−lr·φ(R)·(G − PR)`.
pub fn fira_step(
    state: &mut FiraState,
    hp: &AdamHparams,
    lr: f64,
    w: &mut Matrix,
    g: &Matrix,
) -> Result<ProjectedStep> {
    g.ensure_shape("fira_step", w.shape())?;
    let step = projected_adam(&mut state.galore, hp, g)?;
    let p = state.galore.p.as_ref().expect("projection set");
    let residual = step.residual(p);
    let phi = fira_phi(state.phi_mode, &step.r, &step.direction);
    state.last_phi = phi;
    let mut update = step.lifted.clone();
    update.axpy(phi, &residual)?;
    apply_update(&state.galore, hp, lr, w, update)?;
    Ok(step)
}
