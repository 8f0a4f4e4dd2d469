//! Optimizer kernels: AdamW, heavy-ball SGD with resets, GaLore, Fira,
//! adaptive clipping and the learning-rate schedule.

mod adam;
mod clip;
mod galore;
mod schedule;
mod sgdm;

pub use adam::{adamw_step, AdamHparams, AdamState};
pub use clip::{adaptive_clip, ClipState};
pub use galore::{
    fira_phi, fira_step, galore_step, DecaySpace, FiraState, GaLoreState, PhiMode, ProjectedStep,
};
pub use schedule::{lr_schedule, LrSchedule};
pub use sgdm::{sgdm_step, sgdmr_run, CounterMode, SgdmTrace, SgdmrSchedule, StochasticProblem};

use crate::linalg::Matrix;

/// Optimizer state whose moment buffers can be zeroed in place.
pub trait MomentumReset {
    /// Zeroes all moment buffers; the bias-correction counter is reset too
    /// when `reset_counter` is set. Projections are kept.
    fn reset_momentum(&mut self, reset_counter: bool);

    /// Sum of squared moment entries.
    fn state_sq_norm(&self) -> f64;
}

fn sq(m: &Matrix) -> f64 {
    m.as_slice().iter().map(|x| x * x).sum()
}

impl MomentumReset for AdamState {
    fn reset_momentum(&mut self, reset_counter: bool) {
        self.m.fill(0.0);
        self.v.fill(0.0);
        if reset_counter {
            self.t = 0;
        }
    }

    fn state_sq_norm(&self) -> f64 {
        sq(&self.m) + sq(&self.v)
    }
}

impl MomentumReset for GaLoreState {
    fn reset_momentum(&mut self, reset_counter: bool) {
        self.m_low.fill(0.0);
        self.v_low.fill(0.0);
        if reset_counter {
            self.t = 0;
        }
    }

    fn state_sq_norm(&self) -> f64 {
        sq(&self.m_low) + sq(&self.v_low)
    }
}

impl MomentumReset for FiraState {
    fn reset_momentum(&mut self, reset_counter: bool) {
        self.galore.reset_momentum(reset_counter);
    }

    fn state_sq_norm(&self) -> f64 {
        self.galore.state_sq_norm()
    }
}

/// A bare SGD momentum buffer.
impl MomentumReset for Matrix {
    fn reset_momentum(&mut self, _reset_counter: bool) {
        self.fill(0.0);
    }

    fn state_sq_norm(&self) -> f64 {
        sq(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{kaiming_uniform_init, SeededRng};

    #[test]
    fn reset_zeroes_moments() {
        let mut rng = SeededRng::new(1);
        let mut w = kaiming_uniform_init(3, 3, &mut rng).unwrap();
        let g = kaiming_uniform_init(3, 3, &mut rng).unwrap();
        let hp = AdamHparams::default();
        let mut adam = AdamState::for_shape_of(&w);
        let mut gal = GaLoreState::new(3, 3, 2, 10).unwrap();
        let mut w2 = w.clone();
        for _ in 0..5 {
            adamw_step(&mut adam, &hp, 0.01, &mut w, &g).unwrap();
            galore_step(&mut gal, &hp, 0.01, &mut w2, &g).unwrap();
        }
        let p = gal.p.clone();
        adam.reset_momentum(true);
        gal.reset_momentum(true);
        assert_eq!(adam.state_sq_norm(), 0.0);
        assert_eq!(gal.state_sq_norm(), 0.0);
        assert_eq!(adam.t, 0);
        assert_eq!(gal.p, p);
        assert_eq!(gal.steps, 5);
    }

    #[test]
    fn reset_then_step_matches_fresh_optimizer() {
        let mut rng = SeededRng::new(2);
        let w0 = kaiming_uniform_init(2, 4, &mut rng).unwrap();
        let g = kaiming_uniform_init(2, 4, &mut rng).unwrap();
        let hp = AdamHparams::default();
        let mut used = AdamState::for_shape_of(&w0);
        let mut scratch = w0.clone();
        for _ in 0..7 {
            adamw_step(&mut used, &hp, 0.01, &mut scratch, &g).unwrap();
        }
        used.reset_momentum(true);
        let mut a = w0.clone();
        adamw_step(&mut used, &hp, 0.01, &mut a, &g).unwrap();
        let mut fresh = AdamState::for_shape_of(&w0);
        let mut b = w0.clone();
        adamw_step(&mut fresh, &hp, 0.01, &mut b, &g).unwrap();
        assert_eq!(a, b);
        assert_eq!(used, fresh);
    }
}
