//! A fixed next-token MLP over concatenated context embeddings, with exact
//! backpropagation, synthetic corpora and evaluation.

mod corpus;
mod metrics;

pub use corpus::{generate_markov_corpus, Corpus};
pub use metrics::{read_csv, read_jsonl, write_csv, write_jsonl, MetricRecord};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{kaiming_uniform_init, Matrix, SeededRng};
use crate::params::{init_parameterization, FactorGradients, ParamKind, Parameterization};

/// Logits are clamped to `±LOGIT_CAP` before the softmax.
pub const LOGIT_CAP: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default, deny_unknown_fields)]
pub struct NetConfig {
    pub vocab: usize,
    pub embed_dim: usize,
    pub context_len: usize,
    pub hidden_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            vocab: 64,
            embed_dim: 16,
            context_len: 8,
            hidden_dim: 64,
        }
    }
}

impl NetConfig {
    pub fn input_dim(&self) -> usize {
        self.embed_dim * self.context_len
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.embed_dim == 0 || self.context_len == 0 || self.hidden_dim == 0 {
            return Err(invalid(format!(
                "degenerate network configuration {self:?}"
            )));
        }
        Ok(())
    }
}

/// Contexts (row-major, `len × context_len`) and their next tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub contexts: Vec<usize>,
    pub targets: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyNet {
    pub config: NetConfig,
    /// `vocab × embed_dim`, always dense.
    pub embedding: Matrix,
    /// `hidden × (embed_dim · context_len)`.
    pub layer1: Parameterization,
    /// `vocab × hidden`.
    pub layer2: Parameterization,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetGradients {
    pub embedding: Matrix,
    pub layer1: FactorGradients,
    pub layer2: FactorGradients,
}

impl NetGradients {
    /// Gradients in [`TinyNet::tensors_mut`] order.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.embedding];
        out.extend(self.layer1.tensors());
        out.extend(self.layer2.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.embedding];
        out.extend(self.layer1.tensors_mut());
        out.extend(self.layer2.tensors_mut());
        out
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|t| t.as_slice().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

struct Forward {
    x: Matrix,
    z1: Matrix,
    h: Matrix,
    logits: Matrix,
}

impl TinyNet {
    /// Both linear layers use `kind`; draws are embedding, layer 1, layer 2.
    pub fn init(
        config: NetConfig,
        kind: ParamKind,
        rank: usize,
        delta: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        config.validate()?;
        let embedding = kaiming_uniform_init(config.vocab, config.embed_dim, rng)?;
        let layer1 = init_parameterization(
            kind,
            config.hidden_dim,
            config.input_dim(),
            rank,
            delta,
            rng,
        )?;
        let layer2 =
            init_parameterization(kind, config.vocab, config.hidden_dim, rank, delta, rng)?;
        Ok(Self {
            config,
            embedding,
            layer1,
            layer2,
        })
    }

    pub fn from_parts(
        config: NetConfig,
        embedding: Matrix,
        layer1: Parameterization,
        layer2: Parameterization,
    ) -> Result<Self> {
        config.validate()?;
        embedding.ensure_shape("embedding", (config.vocab, config.embed_dim))?;
        if layer1.shape() != (config.hidden_dim, config.input_dim()) {
            return Err(Error::Shape {
                op: "layer1",
                expected: (config.hidden_dim, config.input_dim()),
                got: layer1.shape(),
            });
        }
        if layer2.shape() != (config.vocab, config.hidden_dim) {
            return Err(Error::Shape {
                op: "layer2",
                expected: (config.vocab, config.hidden_dim),
                got: layer2.shape(),
            });
        }
        Ok(Self {
            config,
            embedding,
            layer1,
            layer2,
        })
    }

    /// Trainable tensors: embedding, then layer 1's, then layer 2's.
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.embedding];
        out.extend(self.layer1.trainable_mut());
        out.extend(self.layer2.trainable_mut());
        out
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.embedding];
        out.extend(self.layer1.trainable());
        out.extend(self.layer2.trainable());
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.embedding.is_finite() && self.layer1.is_finite() && self.layer2.is_finite()
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let c = self.config.context_len;
        if batch.contexts.len() != batch.targets.len() * c {
            return Err(invalid(format!(
                "batch holds {} context tokens for {} targets with context length {c}",
                batch.contexts.len(),
                batch.targets.len()
            )));
        }
        if batch.is_empty() {
            return Err(invalid("empty batch"));
        }
        let v = self.config.vocab;
        for &tok in batch.contexts.iter().chain(&batch.targets) {
            if tok >= v {
                return Err(Error::TokenOutOfRange {
                    token: tok,
                    vocab: v,
                });
            }
        }
        Ok(())
    }

    fn forward(&self, batch: &Batch, w1: &Matrix, w2: &Matrix) -> Result<Forward> {
        self.check_batch(batch)?;
        let NetConfig {
            embed_dim: d,
            context_len: c,
            ..
        } = self.config;
        let bsz = batch.len();
        let mut x = Matrix::zeros(bsz, d * c);
        for (row, ctx) in batch.contexts.chunks(c).enumerate() {
            let out = x.row_mut(row);
            for (slot, &tok) in ctx.iter().enumerate() {
                out[slot * d..(slot + 1) * d].copy_from_slice(self.embedding.row(tok));
            }
        }
        let z1 = x.matmul_t(w1)?;
        let h = z1.map(silu);
        let logits = h.matmul_t(w2)?;
        Ok(Forward { x, z1, h, logits })
    }

    /// Raw (unclamped) logits, one row per example.
    pub fn logits(&self, batch: &Batch) -> Result<Matrix> {
        let w1 = self.layer1.materialize();
        let w2 = self.layer2.materialize();
        Ok(self.forward(batch, &w1, &w2)?.logits)
    }

    /// Per-example negative log-likelihoods.
    pub fn nll(&self, batch: &Batch) -> Result<Vec<f64>> {
        let logits = self.logits(batch)?;
        Ok((0..batch.len())
            .map(|i| row_nll(logits.row(i), batch.targets[i]).0)
            .collect())
    }

    /// Mean cross-entropy in nats.
    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        let nll = self.nll(batch)?;
        Ok(nll.iter().sum::<f64>() / nll.len() as f64)
    }

    /// Mean cross-entropy and exact gradients for every trainable tensor.
    pub fn forward_loss_grad(&self, batch: &Batch) -> Result<(f64, NetGradients)> {
        let w1 = self.layer1.materialize();
        let w2 = self.layer2.materialize();
        let fw = self.forward(batch, &w1, &w2)?;
        let bsz = batch.len();
        let inv_b = 1.0 / bsz as f64;
        let v = self.config.vocab;
        let mut loss = 0.0;
        let mut dlogits = Matrix::zeros(bsz, v);
        for i in 0..bsz {
            let (nll, probs) = row_nll(fw.logits.row(i), batch.targets[i]);
            loss += nll;
            let out = dlogits.row_mut(i);
            for (j, (o, p)) in out.iter_mut().zip(probs).enumerate() {
                let z = fw.logits[(i, j)];
                let indicator = if j == batch.targets[i] { 1.0 } else { 0.0 };
                // the clamp is flat outside the cap
                *o = if z.abs() > LOGIT_CAP {
                    0.0
                } else {
                    (p - indicator) * inv_b
                };
            }
        }
        let g_w2 = dlogits.t_matmul(&fw.h)?;
        let dh = dlogits.matmul(&w2)?;
        let mut dz1 = dh;
        for (g, &z) in dz1.as_mut_slice().iter_mut().zip(fw.z1.as_slice()) {
            *g *= silu_grad(z);
        }
        let g_w1 = dz1.t_matmul(&fw.x)?;
        let dx = dz1.matmul(&w1)?;

        let d = self.config.embed_dim;
        let c = self.config.context_len;
        let mut g_emb = Matrix::zeros(v, d);
        for (row, ctx) in batch.contexts.chunks(c).enumerate() {
            let src = dx.row(row);
            for (slot, &tok) in ctx.iter().enumerate() {
                for (dst, s) in g_emb
                    .row_mut(tok)
                    .iter_mut()
                    .zip(&src[slot * d..(slot + 1) * d])
                {
                    *dst += s;
                }
            }
        }
        Ok((
            loss * inv_b,
            NetGradients {
                embedding: g_emb,
                layer1: self.layer1.factor_gradients(&g_w1)?,
                layer2: self.layer2.factor_gradients(&g_w2)?,
            },
        ))
    }

    /// `exp` of the mean validation NLL, reduced sequentially in fixed-size chunks.
    pub fn evaluate_perplexity(&self, corpus: &Corpus) -> Result<f64> {
        Ok(self.validation_nll(corpus)?.exp())
    }

    pub fn validation_nll(&self, corpus: &Corpus) -> Result<f64> {
        let positions = corpus.validation_positions(self.config.context_len)?;
        let mut total = 0.0;
        for chunk in positions.chunks(512) {
            let batch = corpus.batch_at(chunk, self.config.context_len);
            total += self.nll(&batch)?.iter().sum::<f64>();
        }
        Ok(total / positions.len() as f64)
    }
}

/// NLL of `target` under the softmax of clamped logits, plus the probabilities.
fn row_nll(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let z: Vec<f64> = logits
        .iter()
        .map(|x| x.clamp(-LOGIT_CAP, LOGIT_CAP))
        .collect();
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let nll = sum.ln() + max - z[target];
    (nll, exps.into_iter().map(|e| e / sum).collect())
}

/// Result of comparing analytic gradients with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over tensors.
    pub max_relative_error: f64,
    pub coordinates_checked: usize,
}

/// Central-difference gradient check. With `max_coords`, each tensor is
/// probed on that many coordinates drawn from `rng`, otherwise on all.
pub fn gradcheck(
    net: &TinyNet,
    batch: &Batch,
    step: f64,
    max_coords: Option<usize>,
    rng: &mut SeededRng,
) -> Result<GradCheck> {
    let (_, grads) = net.forward_loss_grad(batch)?;
    let analytic: Vec<Matrix> = grads.tensors().into_iter().cloned().collect();
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (ti, a) in analytic.iter().enumerate() {
        let coords: Vec<usize> = match max_coords {
            Some(k) if k < a.len() => rand::seq::index::sample(rng, a.len(), k).into_vec(),
            _ => (0..a.len()).collect(),
        };
        let mut diff_sq = 0.0;
        let mut a_sq = 0.0;
        let mut n_sq = 0.0;
        for &idx in &coords {
            let orig = probe.tensors()[ti].as_slice()[idx];
            probe.tensors_mut()[ti].as_mut_slice()[idx] = orig + step;
            let up = probe.loss(batch)?;
            probe.tensors_mut()[ti].as_mut_slice()[idx] = orig - step;
            let down = probe.loss(batch)?;
            probe.tensors_mut()[ti].as_mut_slice()[idx] = orig;
            let numeric = (up - down) / (2.0 * step);
            let an = a.as_slice()[idx];
            diff_sq += (an - numeric).powi(2);
            a_sq += an * an;
            n_sq += numeric * numeric;
        }
        checked += coords.len();
        let scale = a_sq.sqrt().max(n_sq.sqrt());
        if scale > 0.0 {
            worst = worst.max(diff_sq.sqrt() / scale);
        }
    }
    Ok(GradCheck {
        max_relative_error: worst,
        coordinates_checked: checked,
    })
}
