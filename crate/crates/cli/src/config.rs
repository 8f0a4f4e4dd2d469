//! Run configuration: method selection, hyperparameters, data source.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use preopt::net::NetConfig;
use preopt::params::ParamKind;
use preopt::restart::RestartPolicy;
use preopt::{Error, Result};
use serde::{Deserialize, Serialize};

/// The peak learning rates tried by a default sweep.
pub const LR_GRID: [f64; 6] = [0.0005, 0.001, 0.002, 0.003, 0.005, 0.01];

pub const SEED_ENV: &str = "PREOPT_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMethod {
    FullAdamw,
    FullStablespam,
    Lowrank,
    Lora,
    Sltrain,
    Galore,
    Fira,
    LowrankRestarts,
    SltrainRestarts,
}

/// How the two linear layers are updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerOptimizer {
    Adam,
    GaLore,
    Fira,
}

impl TrainMethod {
    pub const ALL: [TrainMethod; 9] = [
        TrainMethod::FullAdamw,
        TrainMethod::FullStablespam,
        TrainMethod::Lowrank,
        TrainMethod::Lora,
        TrainMethod::Sltrain,
        TrainMethod::Galore,
        TrainMethod::Fira,
        TrainMethod::LowrankRestarts,
        TrainMethod::SltrainRestarts,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainMethod::FullAdamw => "full-adamw",
            TrainMethod::FullStablespam => "full-stablespam",
            TrainMethod::Lowrank => "lowrank",
            TrainMethod::Lora => "lora",
            TrainMethod::Sltrain => "sltrain",
            TrainMethod::Galore => "galore",
            TrainMethod::Fira => "fira",
            TrainMethod::LowrankRestarts => "lowrank-restarts",
            TrainMethod::SltrainRestarts => "sltrain-restarts",
        }
    }

    pub fn param_kind(self) -> ParamKind {
        match self {
            TrainMethod::FullAdamw
            | TrainMethod::FullStablespam
            | TrainMethod::Galore
            | TrainMethod::Fira => ParamKind::Full,
            TrainMethod::Lowrank | TrainMethod::LowrankRestarts => ParamKind::LowRank,
            TrainMethod::Lora => ParamKind::Lora,
            TrainMethod::Sltrain | TrainMethod::SltrainRestarts => ParamKind::SlTrain,
        }
    }

    pub fn layer_optimizer(self) -> LayerOptimizer {
        match self {
            TrainMethod::Galore => LayerOptimizer::GaLore,
            TrainMethod::Fira => LayerOptimizer::Fira,
            _ => LayerOptimizer::Adam,
        }
    }

    pub fn uses_rank(self) -> bool {
        !matches!(self, TrainMethod::FullAdamw | TrainMethod::FullStablespam)
    }

    pub fn uses_delta(self) -> bool {
        self.param_kind() == ParamKind::SlTrain
    }

    /// Default (refactor, momentum reset) switches.
    pub fn default_restart_flags(self) -> (bool, bool) {
        match self {
            TrainMethod::FullStablespam => (false, true),
            TrainMethod::LowrankRestarts | TrainMethod::SltrainRestarts => (true, true),
            _ => (false, false),
        }
    }

    pub fn default_rewarmup(self) -> usize {
        match self {
            TrainMethod::FullStablespam => 0,
            _ => 50,
        }
    }

    pub fn clips_by_default(self) -> bool {
        self == TrainMethod::FullStablespam
    }
}

impl fmt::Display for TrainMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum CorpusSource {
    /// Random Markov chain over the model vocabulary.
    Synthetic {
        length: usize,
        order: usize,
        seed: u64,
    },
    /// Whitespace-separated integer tokens.
    File(PathBuf),
}

impl Default for CorpusSource {
    fn default() -> Self {
        CorpusSource::Synthetic {
            length: 200_000,
            order: 1,
            seed: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: TrainMethod,
    /// Inner rank; defaults to 8 for methods that use one.
    pub rank: Option<usize>,
    /// Sparse fraction; defaults to 0.03 for SLTrain variants.
    pub delta: Option<f64>,
    pub peak_lr: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub restart_period: usize,
    /// Linear re-warmup after each restart; defaults to 50 steps for the
    /// restart methods and 0 for full-stablespam, whose resets keep the
    /// learning rate.
    pub rewarmup_steps: Option<usize>,
    pub reset_counter: bool,
    /// Overrides the method's default refactorization switch.
    pub apply_refactor: Option<bool>,
    /// Overrides the method's default momentum-reset switch.
    pub apply_momentum_reset: Option<bool>,
    /// Overrides the adaptive-clipping default (on only for full-stablespam).
    pub clip: Option<bool>,
    pub clip_fraction: f64,
    pub galore_period: usize,
    pub weight_decay: f64,
    pub eval_every: usize,
    pub net: NetConfig,
    pub corpus: CorpusSource,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: TrainMethod::FullAdamw,
            rank: None,
            delta: None,
            peak_lr: 0.003,
            total_steps: 2000,
            batch_size: 32,
            seed: 0,
            restart_period: 200,
            rewarmup_steps: None,
            reset_counter: true,
            apply_refactor: None,
            apply_momentum_reset: None,
            clip: None,
            clip_fraction: 1.0,
            galore_period: 200,
            weight_decay: 0.01,
            eval_every: 50,
            net: NetConfig::default(),
            corpus: CorpusSource::default(),
            out_dir: None,
        }
    }
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl TrainConfig {
    pub fn for_method(method: TrainMethod) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Replaces the seed with `PREOPT_SEED` when that variable is set.
    pub fn apply_seed_env(&mut self) -> Result<()> {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            self.seed = raw
                .trim()
                .parse()
                .map_err(|_| cfg_err(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn rank(&self) -> usize {
        if self.method.uses_rank() {
            self.rank.unwrap_or(8)
        } else {
            0
        }
    }

    pub fn delta(&self) -> f64 {
        if self.method.uses_delta() {
            self.delta.unwrap_or(0.03)
        } else {
            0.0
        }
    }

    pub fn clip_enabled(&self) -> bool {
        self.clip.unwrap_or(self.method.clips_by_default())
    }

    pub fn restart_policy(&self) -> RestartPolicy {
        let (refactor, reset) = self.method.default_restart_flags();
        RestartPolicy {
            period: self.restart_period,
            apply_refactor: self.apply_refactor.unwrap_or(refactor),
            apply_momentum_reset: self.apply_momentum_reset.unwrap_or(reset),
            rewarmup_steps: self
                .rewarmup_steps
                .unwrap_or(self.method.default_rewarmup()),
            reset_counter: self.reset_counter,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        let m = self.method;
        if !m.uses_rank() && self.rank.is_some() {
            return Err(cfg_err(format!("rank is not used by {m}")));
        }
        if !m.uses_delta() && self.delta.is_some() {
            return Err(cfg_err(format!(
                "delta is only valid for SLTrain variants, not {m}"
            )));
        }
        if m.uses_rank() {
            let r = self.rank();
            let limit = self
                .net
                .hidden_dim
                .min(self.net.input_dim())
                .min(self.net.vocab);
            if r == 0 || r > limit {
                return Err(cfg_err(format!(
                    "rank {r} outside 1..={limit} for this network"
                )));
            }
        }
        if m.uses_delta() {
            let d = self.delta();
            if !(d > 0.0 && d <= 1.0) {
                return Err(cfg_err(format!("delta {d} outside (0, 1]")));
            }
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(cfg_err(format!(
                "peak-lr must be positive, got {}",
                self.peak_lr
            )));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.galore_period == 0 {
            return Err(cfg_err(
                "batch-size, eval-every and galore-period must be ≥ 1",
            ));
        }
        if !(self.clip_fraction > 0.0 && self.clip_fraction <= 1.0) {
            return Err(cfg_err(format!(
                "clip-fraction {} outside (0, 1]",
                self.clip_fraction
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(cfg_err("weight-decay must be non-negative"));
        }
        let policy = self.restart_policy();
        policy.validate().map_err(|e| cfg_err(e.to_string()))?;
        if policy.apply_refactor && m.param_kind() == ParamKind::Full {
            return Err(cfg_err(format!("{m} has no low-rank factors to refactor")));
        }
        if let CorpusSource::Synthetic { length, .. } = self.corpus {
            if length < 10 * self.net.vocab {
                return Err(cfg_err(
                    "synthetic corpus must hold at least 10 tokens per vocabulary entry",
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_and_kebab_keys() {
        let mut cfg = TrainConfig::for_method(TrainMethod::SltrainRestarts);
        cfg.rank = Some(4);
        cfg.delta = Some(0.05);
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"peak-lr\"") && text.contains("\"sltrain-restarts\""));
        let back: TrainConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        back.validate().unwrap();
    }

    #[test]
    fn partial_json_uses_defaults() {
        let cfg: TrainConfig = serde_json::from_str(r#"{"method": "galore", "rank": 16}"#).unwrap();
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.rank(), 16);
        cfg.validate().unwrap();
        assert!(serde_json::from_str::<TrainConfig>(r#"{"methd": "galore"}"#).is_err());
    }

    #[test]
    fn method_specific_fields_are_checked() {
        let mut cfg = TrainConfig::for_method(TrainMethod::Lowrank);
        cfg.delta = Some(0.1);
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::for_method(TrainMethod::FullAdamw);
        cfg.rank = Some(4);
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::for_method(TrainMethod::FullStablespam);
        cfg.apply_refactor = Some(true);
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::for_method(TrainMethod::Lora);
        cfg.rank = Some(65);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn restart_defaults_per_method() {
        let p = TrainConfig::for_method(TrainMethod::LowrankRestarts).restart_policy();
        assert!(p.apply_refactor && p.apply_momentum_reset && p.period == 200);
        let p = TrainConfig::for_method(TrainMethod::FullStablespam).restart_policy();
        assert!(!p.apply_refactor && p.apply_momentum_reset && p.rewarmup_steps == 0);
        assert!(!TrainConfig::for_method(TrainMethod::Lowrank)
            .restart_policy()
            .is_active());
        assert!(TrainConfig::for_method(TrainMethod::FullStablespam).clip_enabled());
    }

    #[test]
    fn method_names_round_trip() {
        for m in TrainMethod::ALL {
            assert_eq!(m.name().parse::<TrainMethod>().unwrap(), m);
        }
        assert!("adam".parse::<TrainMethod>().is_err());
    }
}
