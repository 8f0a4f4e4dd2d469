//! The single-threaded training loop.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use preopt::linalg::{Matrix, SeededRng};
use preopt::net::{
    generate_markov_corpus, write_csv, write_jsonl, Batch, Corpus, MetricRecord, TinyNet,
};
use preopt::optim::{
    adamw_step, adaptive_clip, fira_step, galore_step, AdamHparams, AdamState, ClipState,
    FiraState, GaLoreState, LrSchedule, MomentumReset,
};
use preopt::params::ParamKind;
use preopt::restart::{restart_apply, RestartPolicy, RestartTargets};
use preopt::{Error, Result};
use serde::Serialize;

use crate::config::{CorpusSource, LayerOptimizer, TrainConfig};

const INIT_STREAM: u64 = 0;
const DATA_STREAM: u64 = 1;

pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSONL: &str = "metrics.jsonl";
pub const SUMMARY_JSON: &str = "summary.json";

pub fn load_corpus(cfg: &TrainConfig) -> Result<Corpus> {
    match &cfg.corpus {
        CorpusSource::Synthetic {
            length,
            order,
            seed,
        } => {
            let mut rng = SeededRng::new(*seed);
            generate_markov_corpus(cfg.net.vocab, *length, *order, &mut rng)
        }
        CorpusSource::File(path) => Corpus::load(path, cfg.net.vocab),
    }
}

/// Optimizer state attached to one trainable tensor.
#[derive(Debug, Clone)]
pub enum TensorState {
    Adam(AdamState),
    GaLore(GaLoreState),
    Fira(FiraState),
}

impl TensorState {
    fn step(&mut self, hp: &AdamHparams, lr: f64, w: &mut Matrix, g: &Matrix) -> Result<()> {
        match self {
            TensorState::Adam(s) => adamw_step(s, hp, lr, w, g),
            TensorState::GaLore(s) => galore_step(s, hp, lr, w, g).map(|_| ()),
            TensorState::Fira(s) => fira_step(s, hp, lr, w, g).map(|_| ()),
        }
    }

    fn as_reset(&mut self) -> &mut dyn MomentumReset {
        match self {
            TensorState::Adam(s) => s,
            TensorState::GaLore(s) => s,
            TensorState::Fira(s) => s,
        }
    }

    fn sq_norm(&self) -> f64 {
        match self {
            TensorState::Adam(s) => s.state_sq_norm(),
            TensorState::GaLore(s) => s.state_sq_norm(),
            TensorState::Fira(s) => s.state_sq_norm(),
        }
    }
}

/// A network together with everything its optimizer keeps between steps.
pub struct Trainer {
    pub net: TinyNet,
    pub states: Vec<TensorState>,
    /// Whether each tensor is a `B` or `A` factor.
    pub is_factor: Vec<bool>,
    pub clips: Option<Vec<ClipState>>,
    pub schedule: LrSchedule,
    pub policy: RestartPolicy,
    pub hparams: AdamHparams,
}

fn layer_roles(kind: ParamKind) -> Vec<bool> {
    match kind {
        ParamKind::Full => vec![false],
        ParamKind::LowRank | ParamKind::Lora => vec![true, true],
        ParamKind::SlTrain => vec![true, true, false],
    }
}

impl Trainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SeededRng::with_stream(cfg.seed, INIT_STREAM);
        let kind = cfg.method.param_kind();
        let net = TinyNet::init(cfg.net, kind, cfg.rank().max(1), cfg.delta(), &mut rng)?;
        let mut is_factor = vec![false];
        is_factor.extend(layer_roles(kind));
        is_factor.extend(layer_roles(kind));
        let layer_opt = cfg.method.layer_optimizer();
        let states = net
            .tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let (m, n) = t.shape();
                Ok(match (i, layer_opt) {
                    (0, _) | (_, LayerOptimizer::Adam) => TensorState::Adam(AdamState::new(m, n)),
                    (_, LayerOptimizer::GaLore) => {
                        TensorState::GaLore(GaLoreState::new(m, n, cfg.rank(), cfg.galore_period)?)
                    }
                    (_, LayerOptimizer::Fira) => {
                        TensorState::Fira(FiraState::new(m, n, cfg.rank(), cfg.galore_period)?)
                    }
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let clips = if cfg.clip_enabled() {
            Some(
                states
                    .iter()
                    .map(|_| ClipState::new(cfg.clip_fraction))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let policy = cfg.restart_policy();
        Ok(Self {
            net,
            states,
            is_factor,
            clips,
            schedule: LrSchedule::new(cfg.total_steps, cfg.peak_lr)
                .with_rewarmup(policy.rewarmup_steps),
            policy,
            hparams: AdamHparams {
                weight_decay: cfg.weight_decay,
                ..AdamHparams::default()
            },
        })
    }

    pub fn state_norm(&self) -> f64 {
        self.states
            .iter()
            .map(TensorState::sq_norm)
            .sum::<f64>()
            .sqrt()
    }

    /// One optimizer update on `batch` with the learning rate for `step`.
    /// Returns the loss and the gradient norm before clipping.
    pub fn update(&mut self, step: usize, batch: &Batch) -> Result<(f64, f64)> {
        let (loss, mut grads) = self.net.forward_loss_grad(batch)?;
        let grad_norm = grads.norm();
        if !loss.is_finite() {
            return Ok((loss, grad_norm));
        }
        let lr = self.schedule.lr(step)?;
        let mut gs = grads.tensors_mut();
        if let Some(clips) = &mut self.clips {
            for (c, g) in clips.iter_mut().zip(gs.iter_mut()) {
                adaptive_clip(c, g);
            }
        }
        for ((w, g), s) in self
            .net
            .tensors_mut()
            .into_iter()
            .zip(gs)
            .zip(&mut self.states)
        {
            s.step(&self.hparams, lr, w, g)?;
        }
        Ok((loss, grad_norm))
    }

    /// Applies the restart policy if it fires at `step`; returns whether it did.
    pub fn maybe_restart(&mut self, step: usize) -> Result<bool> {
        if !self.policy.is_active() || !self.policy.is_due(step) {
            return Ok(false);
        }
        let mut factor_states: Vec<&mut dyn MomentumReset> = Vec::new();
        let mut other_states: Vec<&mut dyn MomentumReset> = Vec::new();
        for (s, &f) in self.states.iter_mut().zip(&self.is_factor) {
            if f {
                factor_states.push(s.as_reset());
            } else {
                other_states.push(s.as_reset());
            }
        }
        let targets = RestartTargets {
            layers: vec![&mut self.net.layer1, &mut self.net.layer2],
            factor_states,
            other_states,
        };
        restart_apply(&self.policy, step, targets, &mut self.schedule)?;
        Ok(true)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunOutput {
    pub records: Vec<MetricRecord>,
    pub final_record: MetricRecord,
    pub diverged: bool,
    pub restarts: usize,
    /// Trainable parameters outside the embedding table.
    pub non_embedding_params: usize,
}

/// Runs `cfg` and writes metrics when an output directory is configured.
pub fn run_train(cfg: &TrainConfig) -> Result<RunOutput> {
    let corpus = load_corpus(cfg)?;
    let out = train_on(cfg, &corpus)?;
    if let Some(dir) = &cfg.out_dir {
        write_outputs(dir, cfg, &out)?;
    }
    Ok(out)
}

/// Divergence threshold on the training loss.
pub fn divergence_threshold(vocab: usize) -> f64 {
    10.0 * (vocab as f64).ln()
}

pub fn train_on(cfg: &TrainConfig, corpus: &Corpus) -> Result<RunOutput> {
    if corpus.vocab() != cfg.net.vocab {
        return Err(Error::Config(format!(
            "corpus vocabulary {} differs from the network's {}",
            corpus.vocab(),
            cfg.net.vocab
        )));
    }
    let mut trainer = Trainer::new(cfg)?;
    let non_embedding_params = trainer.net.trainable_count() - trainer.net.embedding.len();
    let mut data_rng = SeededRng::with_stream(cfg.seed, DATA_STREAM);
    let c = cfg.net.context_len;
    let limit = divergence_threshold(cfg.net.vocab);
    let total = cfg.total_steps;

    let first = corpus.sample_batch(cfg.batch_size, c, &mut data_rng)?;
    let (loss0, grads0) = trainer.net.forward_loss_grad(&first)?;
    let mut records = vec![MetricRecord {
        step: 0,
        train_loss: loss0,
        val_ppl: trainer.net.evaluate_perplexity(corpus)?,
        lr: 0.0,
        grad_norm: grads0.norm(),
        state_norm: trainer.state_norm(),
        event: None,
    }];

    let mut pending = Some(first);
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    let mut restarts = 0;
    let mut diverged = false;
    for u in 0..total {
        let batch = match pending.take() {
            Some(b) => b,
            None => corpus.sample_batch(cfg.batch_size, c, &mut data_rng)?,
        };
        let lr = trainer.schedule.lr(u)?;
        let (loss, grad_norm) = trainer.update(u, &batch)?;
        if !loss.is_finite() || loss > limit || !trainer.net.is_finite() {
            log::warn!("run diverged at step {u} with train loss {loss}");
            records.push(MetricRecord {
                step: u,
                train_loss: loss,
                val_ppl: trainer.net.evaluate_perplexity(corpus).unwrap_or(f64::NAN),
                lr,
                grad_norm,
                state_norm: trainer.state_norm(),
                event: Some("diverged".into()),
            });
            diverged = true;
            break;
        }
        loss_sum += loss;
        loss_count += 1;
        let s = u + 1;
        let restarted = s < total && trainer.maybe_restart(s)?;
        restarts += usize::from(restarted);
        if restarted || s % cfg.eval_every == 0 || s == total {
            records.push(MetricRecord {
                step: s,
                train_loss: loss_sum / loss_count as f64,
                val_ppl: trainer.net.evaluate_perplexity(corpus)?,
                lr,
                grad_norm,
                state_norm: trainer.state_norm(),
                event: restarted.then(|| "restart".to_string()),
            });
            loss_sum = 0.0;
            loss_count = 0;
        }
    }
    let final_record = records.last().cloned().expect("initial row present");
    Ok(RunOutput {
        records,
        final_record,
        diverged,
        restarts,
        non_embedding_params,
    })
}

#[derive(Serialize)]
struct Summary<'a> {
    config: &'a TrainConfig,
    final_record: &'a MetricRecord,
    diverged: bool,
    restarts: usize,
    non_embedding_params: usize,
}

pub fn write_outputs(dir: &Path, cfg: &TrainConfig, out: &RunOutput) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let csv_path = dir.join(METRICS_CSV);
    let jsonl_path = dir.join(METRICS_JSONL);
    let summary_path = dir.join(SUMMARY_JSON);
    write_csv(BufWriter::new(fs::File::create(&csv_path)?), &out.records)?;
    write_jsonl(BufWriter::new(fs::File::create(&jsonl_path)?), &out.records)?;
    let summary = Summary {
        config: cfg,
        final_record: &out.final_record,
        diverged: out.diverged,
        restarts: out.restarts,
        non_embedding_params: out.non_embedding_params,
    };
    fs::write(
        &summary_path,
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    Ok(vec![csv_path, jsonl_path, summary_path])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainMethod;

    fn small(method: TrainMethod, steps: usize) -> TrainConfig {
        TrainConfig {
            total_steps: steps,
            corpus: CorpusSource::Synthetic {
                length: 4000,
                order: 1,
                seed: 2,
            },
            ..TrainConfig::for_method(method)
        }
    }

    #[test]
    fn zero_steps_emit_only_initial_row() {
        let out = run_train(&small(TrainMethod::Lowrank, 0)).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.final_record.step, 0);
        assert_eq!(out.final_record.lr, 0.0);
    }

    #[test]
    fn rows_follow_eval_cadence() {
        let out = run_train(&small(TrainMethod::Galore, 120)).unwrap();
        let steps: Vec<usize> = out.records.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 50, 100, 120]);
        assert!(!out.diverged);
    }

    #[test]
    fn restart_rows_show_zeroed_state() {
        let mut cfg = small(TrainMethod::LowrankRestarts, 250);
        cfg.restart_period = 100;
        let out = run_train(&cfg).unwrap();
        let tagged: Vec<&MetricRecord> = out.records.iter().filter(|r| r.event.is_some()).collect();
        assert_eq!(
            tagged.iter().map(|r| r.step).collect::<Vec<_>>(),
            vec![100, 200]
        );
        assert!(tagged.iter().all(|r| r.state_norm == 0.0));
        assert_eq!(out.restarts, 2);
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let mut cfg = small(TrainMethod::FullAdamw, 200);
        cfg.peak_lr = 1e6;
        let out = run_train(&cfg).unwrap();
        assert!(out.diverged);
        assert_eq!(out.final_record.event.as_deref(), Some("diverged"));
    }

    #[test]
    fn every_method_improves_on_its_initialization() {
        for m in TrainMethod::ALL {
            let cfg = TrainConfig {
                total_steps: 400,
                peak_lr: 0.01,
                eval_every: 400,
                ..TrainConfig::for_method(m)
            };
            let out = run_train(&cfg).unwrap();
            assert!(!out.diverged, "{m}");
            let (start, end) = (out.records[0].val_ppl, out.final_record.val_ppl);
            assert!(end < start, "{m}: {start} -> {end}");
        }
    }
}
