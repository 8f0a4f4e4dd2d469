use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::params::{read_f64s, read_u32, read_u64, to_u32, write_f64s};

/// AdamW hyperparameters; the learning rate is supplied per step by the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHparams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHparams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamHparams {
    pub fn without_decay(self) -> Self {
        Self {
            weight_decay: 0.0,
            ..self
        }
    }

    /// Bias corrections `(1 − β₁ᵗ, 1 − β₂ᵗ)` for step count `t ≥ 1`.
    pub(crate) fn corrections(&self, t: u64) -> (f64, f64) {
        let t = t as i32;
        (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Matrix,
    pub v: Matrix,
    pub t: u64,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            t: 0,
        }
    }

    pub fn for_shape_of(w: &Matrix) -> Self {
        Self::new(w.rows(), w.cols())
    }

    pub fn element_count(&self) -> usize {
        self.m.len() + self.v.len()
    }

    const MAGIC: &'static [u8; 4] = b"PADM";

    /// Same little-endian layout family as parameter checkpoints:
    /// magic, rows, cols (u32), step (u64), then `m` and `v`.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(Self::MAGIC)?;
        out.write_all(&to_u32(self.m.rows())?.to_le_bytes())?;
        out.write_all(&to_u32(self.m.cols())?.to_le_bytes())?;
        out.write_all(&self.t.to_le_bytes())?;
        write_f64s(&mut out, self.m.as_slice())?;
        write_f64s(&mut out, self.v.as_slice())?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::Checkpoint("bad optimizer-state magic".into()));
        }
        let rows = read_u32(&mut input)? as usize;
        let cols = read_u32(&mut input)? as usize;
        let t = read_u64(&mut input)?;
        let m = Matrix::from_vec(rows, cols, read_f64s(&mut input, rows * cols)?)?;
        let v = Matrix::from_vec(rows, cols, read_f64s(&mut input, rows * cols)?)?;
        Ok(Self { m, v, t })
    }
}

/// One decoupled-weight-decay Adam step with bias correction:
/// `w ← w − lr·m̂/(√v̂ + ε) − lr·wd·w`.
pub fn adamw_step(
    state: &mut AdamState,
    hp: &AdamHparams,
    lr: f64,
    w: &mut Matrix,
    g: &Matrix,
) -> Result<()> {
    g.ensure_shape("adamw_step", w.shape())?;
    state.m.ensure_shape("adamw_step", w.shape())?;
    state.t += 1;
    let (c1, c2) = hp.corrections(state.t);
    let m = state.m.as_mut_slice();
    let v = state.v.as_mut_slice();
    for (((wi, &gi), mi), vi) in w
        .as_mut_slice()
        .iter_mut()
        .zip(g.as_slice())
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        *mi = hp.beta1 * *mi + (1.0 - hp.beta1) * gi;
        *vi = hp.beta2 * *vi + (1.0 - hp.beta2) * gi * gi;
        let m_hat = *mi / c1;
        let v_hat = *vi / c2;
        *wi -= lr * (m_hat / (v_hat.sqrt() + hp.eps)) + lr * hp.weight_decay * *wi;
    }
    Ok(())
}
