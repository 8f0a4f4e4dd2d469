use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::Matrix;

/// Clipping against the largest gradient norm seen so far.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipState {
    pub running_max: f64,
    pub fraction: f64,
}

impl ClipState {
    pub fn new(fraction: f64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(invalid(format!(
                "clip fraction must lie in (0, 1], got {fraction}"
            )));
        }
        Ok(Self {
            running_max: 0.0,
            fraction,
        })
    }
}

/// Clips `g` in place and returns whether it was rescaled. The threshold is
/// `fraction` times the running maximum before this call; the maximum is
/// then updated with the unclipped norm.
pub fn adaptive_clip(state: &mut ClipState, g: &mut Matrix) -> bool {
    let norm = g.frobenius_norm();
    let prev = state.running_max;
    let limit = state.fraction * prev;
    let clipped = prev > 0.0 && norm > limit;
    if clipped {
        g.scale_in_place(limit / norm);
    }
    state.running_max = prev.max(norm);
    clipped
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_norm(x: f64) -> Matrix {
        Matrix::from_rows(&[vec![x * 0.6, x * 0.8]])
    }

    #[test]
    fn constant_norms_never_clip() {
        let mut s = ClipState::new(1.0).unwrap();
        for _ in 0..10 {
            let mut g = with_norm(2.0);
            assert!(!adaptive_clip(&mut s, &mut g));
        }
    }

    #[test]
    fn spike_is_rescaled() {
        let mut s = ClipState::new(1.0).unwrap();
        let mut out = Vec::new();
        for x in [1.0, 1.0, 100.0] {
            let mut g = with_norm(x);
            adaptive_clip(&mut s, &mut g);
            out.push(g.frobenius_norm());
        }
        assert!((out[2] - 1.0).abs() < 1e-12);
        assert_eq!(s.running_max, 100.0);
    }

    #[test]
    fn first_step_never_clips() {
        let mut s = ClipState::new(0.1).unwrap();
        let mut g = with_norm(1e6);
        assert!(!adaptive_clip(&mut s, &mut g));
    }

    #[test]
    fn bad_fraction() {
        assert!(ClipState::new(0.0).is_err());
        assert!(ClipState::new(1.5).is_err());
    }
}
