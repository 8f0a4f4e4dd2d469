//! Paired-seed method comparisons with per-arm learning-rate selection.

use std::collections::BTreeMap;

use preopt::net::Corpus;
use preopt::Result;
use serde::Serialize;

use crate::config::{TrainConfig, TrainMethod, LR_GRID};
use crate::sweep::{ablation_config, parallel_map, AblationArm};
use crate::train::{load_corpus, train_on};

/// A claimed ordering: `candidate` should end no worse than `baseline`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Claim {
    pub label: &'static str,
    pub candidate: TrainMethod,
    pub baseline: TrainMethod,
    pub wins_required: usize,
}

pub const DIRECTIONAL_CLAIMS: [Claim; 4] = [
    Claim {
        label: "fira <= galore",
        candidate: TrainMethod::Fira,
        baseline: TrainMethod::Galore,
        wins_required: 7,
    },
    Claim {
        label: "sltrain <= lowrank",
        candidate: TrainMethod::Sltrain,
        baseline: TrainMethod::Lowrank,
        wins_required: 7,
    },
    Claim {
        label: "lowrank-restarts <= lowrank",
        candidate: TrainMethod::LowrankRestarts,
        baseline: TrainMethod::Lowrank,
        wins_required: 8,
    },
    Claim {
        label: "full-stablespam <= full-adamw",
        candidate: TrainMethod::FullStablespam,
        baseline: TrainMethod::FullAdamw,
        wins_required: 7,
    },
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LrChoice {
    pub method: TrainMethod,
    pub peak_lr: f64,
    /// Final perplexity per grid point on the selection seed (NaN when diverged).
    pub grid: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairedOutcome {
    pub claim: Claim,
    pub candidate_lr: f64,
    pub baseline_lr: f64,
    /// `(seed, candidate ppl, baseline ppl)`.
    pub per_seed: Vec<(u64, f64, f64)>,
    pub wins: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExperimentPlan {
    pub selection_seed: u64,
    pub eval_seeds: usize,
    pub jobs: usize,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            selection_seed: 1000,
            eval_seeds: 10,
            jobs: 0,
        }
    }
}

fn final_ppl(cfg: &TrainConfig, corpus: &Corpus) -> Result<f64> {
    let out = train_on(cfg, corpus)?;
    Ok(if out.diverged {
        f64::NAN
    } else {
        out.final_record.val_ppl
    })
}

/// Cheapest valid logging for a run whose only output is the final record.
fn quiet(mut cfg: TrainConfig) -> TrainConfig {
    cfg.eval_every = cfg.total_steps.max(1);
    cfg.out_dir = None;
    cfg
}

/// Grid point with the lowest finite final perplexity on `seed`.
pub fn select_lrs(
    base: &TrainConfig,
    methods: &[TrainMethod],
    seed: u64,
    jobs: usize,
    corpus: &Corpus,
) -> Result<Vec<LrChoice>> {
    let jobs_list: Vec<(TrainMethod, f64)> = methods
        .iter()
        .flat_map(|&m| LR_GRID.iter().map(move |&lr| (m, lr)))
        .collect();
    let results = parallel_map(&jobs_list, jobs, |&(method, lr)| {
        let cfg = quiet(TrainConfig {
            method,
            peak_lr: lr,
            seed,
            ..base.clone()
        });
        final_ppl(&cfg, corpus)
    });
    let mut grid: BTreeMap<TrainMethod, Vec<(f64, f64)>> = BTreeMap::new();
    for (&(m, lr), r) in jobs_list.iter().zip(results) {
        grid.entry(m).or_default().push((lr, r?));
    }
    Ok(methods
        .iter()
        .map(|m| {
            let g = grid.remove(m).unwrap_or_default();
            let best = g
                .iter()
                .filter(|(_, p)| p.is_finite())
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map_or(LR_GRID[0], |(lr, _)| *lr);
            LrChoice {
                method: *m,
                peak_lr: best,
                grid: g,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DirectionalReport {
    pub plan: ExperimentPlan,
    pub lr_choices: Vec<LrChoice>,
    pub outcomes: Vec<PairedOutcome>,
}

/// Runs every claim: learning rates are picked per method on the selection
/// seed, then each method runs on seeds `0..eval_seeds` at its chosen rate.
pub fn directional_suite(
    base: &TrainConfig,
    claims: &[Claim],
    plan: ExperimentPlan,
) -> Result<DirectionalReport> {
    let corpus = load_corpus(base)?;
    let mut methods: Vec<TrainMethod> = claims
        .iter()
        .flat_map(|c| [c.candidate, c.baseline])
        .collect();
    methods.sort();
    methods.dedup();
    let lr_choices = select_lrs(base, &methods, plan.selection_seed, plan.jobs, &corpus)?;
    let lr_of = |m: TrainMethod| {
        lr_choices
            .iter()
            .find(|c| c.method == m)
            .expect("selected")
            .peak_lr
    };

    let runs: Vec<(TrainMethod, u64)> = methods
        .iter()
        .flat_map(|&m| (0..plan.eval_seeds as u64).map(move |s| (m, s)))
        .collect();
    let results = parallel_map(&runs, plan.jobs, |&(method, seed)| {
        let cfg = quiet(TrainConfig {
            method,
            peak_lr: lr_of(method),
            seed,
            ..base.clone()
        });
        final_ppl(&cfg, &corpus)
    });
    let mut ppl: BTreeMap<(TrainMethod, u64), f64> = BTreeMap::new();
    for (&key, r) in runs.iter().zip(results) {
        ppl.insert(key, r?);
    }

    let outcomes = claims
        .iter()
        .map(|&claim| {
            let per_seed: Vec<(u64, f64, f64)> = (0..plan.eval_seeds as u64)
                .map(|s| (s, ppl[&(claim.candidate, s)], ppl[&(claim.baseline, s)]))
                .collect();
            let wins = per_seed.iter().filter(|(_, c, b)| c <= b).count();
            PairedOutcome {
                claim,
                candidate_lr: lr_of(claim.candidate),
                baseline_lr: lr_of(claim.baseline),
                per_seed,
                wins,
                passed: wins >= claim.wins_required,
            }
        })
        .collect();
    Ok(DirectionalReport {
        plan,
        lr_choices,
        outcomes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationComparison {
    /// `(seed, both-arm ppl, neither-arm ppl)`.
    pub per_seed: Vec<(u64, f64, f64)>,
    pub wins: usize,
}

/// Final perplexity of the "both" arm against the "neither" arm over seeds.
pub fn ablation_comparison(
    base: &TrainConfig,
    seeds: &[u64],
    jobs: usize,
) -> Result<AblationComparison> {
    let corpus = load_corpus(base)?;
    let runs: Vec<(AblationArm, u64)> = seeds
        .iter()
        .flat_map(|&s| [(AblationArm::Both, s), (AblationArm::Neither, s)])
        .collect();
    let results = parallel_map(&runs, jobs, |&(arm, seed)| {
        let cfg = quiet(TrainConfig {
            seed,
            ..ablation_config(base, arm)
        });
        final_ppl(&cfg, &corpus)
    });
    let vals = results.into_iter().collect::<Result<Vec<_>>>()?;
    let per_seed: Vec<(u64, f64, f64)> = seeds
        .iter()
        .enumerate()
        .map(|(i, &s)| (s, vals[2 * i], vals[2 * i + 1]))
        .collect();
    let wins = per_seed.iter().filter(|(_, b, n)| b <= n).count();
    Ok(AblationComparison { per_seed, wins })
}
