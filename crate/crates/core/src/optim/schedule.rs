use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Linear warmup, cosine decay to a floor, and short linear re-warmups after
/// registered restart points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub total_steps: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    /// Final learning rate as a fraction of the peak.
    pub floor_fraction: f64,
    pub rewarmup_steps: usize,
    restart_points: Vec<usize>,
}

impl LrSchedule {
    pub fn new(total_steps: usize, peak_lr: f64) -> Self {
        Self {
            total_steps,
            peak_lr,
            warmup_fraction: 0.1,
            floor_fraction: 0.1,
            rewarmup_steps: 50,
            restart_points: Vec::new(),
        }
    }

    pub fn with_rewarmup(mut self, steps: usize) -> Self {
        self.rewarmup_steps = steps;
        self
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.total_steps as f64).round() as usize
    }

    pub fn restart_points(&self) -> &[usize] {
        &self.restart_points
    }

    /// Registers a restart; points are kept sorted and unique.
    pub fn add_restart(&mut self, step: usize) {
        if let Err(pos) = self.restart_points.binary_search(&step) {
            self.restart_points.insert(pos, step);
        }
    }

    /// The global warmup-plus-cosine envelope without restart ramps.
    pub fn envelope(&self, step: usize) -> Result<f64> {
        self.check(step)?;
        let warm = self.warmup_steps();
        if step < warm {
            return Ok(self.peak_lr * step as f64 / warm as f64);
        }
        let progress = (step - warm) as f64 / (self.total_steps - warm) as f64;
        let floor = self.floor_fraction * self.peak_lr;
        Ok(floor + (self.peak_lr - floor) * 0.5 * (1.0 + (PI * progress).cos()))
    }

    pub fn lr(&self, step: usize) -> Result<f64> {
        let base = self.envelope(step)?;
        Ok(base * self.ramp(step))
    }

    fn ramp(&self, step: usize) -> f64 {
        if self.rewarmup_steps == 0 {
            return 1.0;
        }
        let idx = self.restart_points.partition_point(|&p| p <= step);
        match idx.checked_sub(1).map(|i| self.restart_points[i]) {
            Some(p) if step - p < self.rewarmup_steps => {
                (step - p) as f64 / self.rewarmup_steps as f64
            }
            _ => 1.0,
        }
    }

    fn check(&self, step: usize) -> Result<()> {
        if step >= self.total_steps {
            return Err(invalid(format!(
                "step {step} outside schedule of {} steps",
                self.total_steps
            )));
        }
        Ok(())
    }
}

pub fn lr_schedule(
    step: usize,
    total_steps: usize,
    peak_lr: f64,
    restart_points: &[usize],
) -> Result<f64> {
    let mut s = LrSchedule::new(total_steps, peak_lr);
    for &p in restart_points {
        s.add_restart(p);
    }
    s.lr(step)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_and_floor() {
        assert_eq!(lr_schedule(0, 1000, 0.01, &[]).unwrap(), 0.0);
        assert!((lr_schedule(100, 1000, 0.01, &[]).unwrap() - 0.01).abs() < 1e-15);
        let last = lr_schedule(999, 1000, 0.01, &[]).unwrap();
        let increment = 0.9 * 0.01 * (PI / 900.0);
        assert!((last - 0.001).abs() <= increment);
        assert!(lr_schedule(1000, 1000, 0.01, &[]).is_err());
    }

    #[test]
    fn restart_drops_and_ramps() {
        let s = lr_schedule(400, 2000, 0.003, &[400]).unwrap();
        assert_eq!(s, 0.0);
        let env = lr_schedule(425, 2000, 0.003, &[]).unwrap();
        let mid = lr_schedule(425, 2000, 0.003, &[400]).unwrap();
        assert!((mid - 0.5 * env).abs() < 1e-15);
        assert_eq!(
            lr_schedule(450, 2000, 0.003, &[400]).unwrap(),
            lr_schedule(450, 2000, 0.003, &[]).unwrap()
        );
    }

    #[test]
    fn continuous_away_from_restarts() {
        let s = LrSchedule::new(2000, 0.01);
        let mut prev = s.lr(0).unwrap();
        for step in 1..2000 {
            let x = s.lr(step).unwrap();
            assert!((x - prev).abs() <= 0.01 / 200.0 + 1e-15);
            prev = x;
        }
    }
}
