//! Grid sweeps with per-method learning-rate selection, and the four-arm
//! restart ablation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use preopt::estimator::flops;
use preopt::net::{write_csv, Corpus, MetricRecord};
use preopt::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::{TrainConfig, TrainMethod, LR_GRID};
use crate::train::{load_corpus, train_on, write_outputs, RunOutput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct SweepSpec {
    /// Shared settings; method, rank, peak lr and seed are overwritten per tuple.
    pub base: TrainConfig,
    pub methods: Vec<TrainMethod>,
    /// Ranks for methods that take one; ignored by full-rank methods.
    pub ranks: Vec<usize>,
    pub lrs: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Worker threads; 0 uses the available parallelism.
    pub jobs: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            base: TrainConfig::default(),
            methods: TrainMethod::ALL.to_vec(),
            ranks: vec![8],
            lrs: LR_GRID.to_vec(),
            seeds: vec![0],
            jobs: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tuple {
    pub method: TrainMethod,
    pub rank: Option<usize>,
    pub peak_lr: f64,
    pub seed: u64,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(Error::Config("sweep seeds must be distinct".into()));
        }
        if self.tuples().is_empty() {
            return Err(Error::Config("sweep grid is empty".into()));
        }
        for t in self.tuples() {
            self.config_for(&t).validate()?;
        }
        Ok(())
    }

    pub fn tuples(&self) -> Vec<Tuple> {
        let mut out = Vec::new();
        for &method in &self.methods {
            let ranks: Vec<Option<usize>> = if method.uses_rank() {
                self.ranks.iter().copied().map(Some).collect()
            } else {
                vec![None]
            };
            for &rank in &ranks {
                for &peak_lr in &self.lrs {
                    for &seed in &self.seeds {
                        out.push(Tuple {
                            method,
                            rank,
                            peak_lr,
                            seed,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn config_for(&self, t: &Tuple) -> TrainConfig {
        let mut cfg = self.base.clone();
        cfg.method = t.method;
        cfg.rank = t.rank;
        if !t.method.uses_delta() {
            cfg.delta = None;
        }
        cfg.peak_lr = t.peak_lr;
        cfg.seed = t.seed;
        cfg.out_dir = None;
        cfg
    }
}

pub fn run_dir_name(t: &Tuple) -> String {
    match t.rank {
        Some(r) => format!("{}-r{r}-lr{}-s{}", t.method, t.peak_lr, t.seed),
        None => format!("{}-lr{}-s{}", t.method, t.peak_lr, t.seed),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub tuple: Tuple,
    pub final_record: MetricRecord,
    pub diverged: bool,
    pub flops: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodBest {
    pub method: TrainMethod,
    pub rank: Option<usize>,
    pub peak_lr: f64,
    /// Mean final validation perplexity over the sweep seeds.
    pub val_ppl: f64,
    /// The per-seed final records of the selected setting.
    pub records: Vec<MetricRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub runs: Vec<RunSummary>,
    pub best: Vec<MethodBest>,
    /// Tuples excluded from selection because they diverged or ended non-finite.
    pub divergent: Vec<Tuple>,
}

/// Runs every job on a pool of scoped worker threads. Jobs share nothing
/// mutable; results come back in job order.
pub fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    jobs: usize,
    f: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    let workers = match jobs {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        j => j,
    }
    .min(items.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("result slots")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|r| r.expect("job finished"))
        .collect()
}

fn is_usable(run: &RunSummary) -> bool {
    !run.diverged && run.final_record.val_ppl.is_finite()
}

/// Picks, per method, the (rank, lr) with the lowest mean final perplexity
/// among settings whose runs all stayed finite.
pub fn select_best(runs: &[RunSummary]) -> Vec<MethodBest> {
    let mut groups: BTreeMap<(TrainMethod, Option<usize>, u64), Vec<&RunSummary>> = BTreeMap::new();
    for r in runs {
        groups
            .entry((r.tuple.method, r.tuple.rank, r.tuple.peak_lr.to_bits()))
            .or_default()
            .push(r);
    }
    let mut best: BTreeMap<TrainMethod, MethodBest> = BTreeMap::new();
    for ((method, rank, lr_bits), members) in groups {
        if !members.iter().all(|r| is_usable(r)) {
            continue;
        }
        let mean =
            members.iter().map(|r| r.final_record.val_ppl).sum::<f64>() / members.len() as f64;
        let better = best.get(&method).is_none_or(|b| mean < b.val_ppl);
        if better {
            best.insert(
                method,
                MethodBest {
                    method,
                    rank,
                    peak_lr: f64::from_bits(lr_bits),
                    val_ppl: mean,
                    records: members.iter().map(|r| r.final_record.clone()).collect(),
                },
            );
        }
    }
    best.into_values().collect()
}

fn summarize(t: Tuple, out: &RunOutput, cfg: &TrainConfig) -> Result<RunSummary> {
    let steps = cfg.total_steps.max(1) as u128;
    Ok(RunSummary {
        tuple: t,
        final_record: out.final_record.clone(),
        diverged: out.diverged,
        flops: flops(
            out.non_embedding_params as u128,
            cfg.batch_size as u128,
            steps,
        )?,
    })
}

pub fn run_sweep(spec: &SweepSpec) -> Result<SweepReport> {
    run_sweep_into(spec, None)
}

/// As [`run_sweep`]; with `out` set, each run's metrics go to its own
/// subdirectory and the summary files to `out`.
pub fn run_sweep_into(spec: &SweepSpec, out: Option<&Path>) -> Result<SweepReport> {
    spec.validate()?;
    let corpus = load_corpus(&spec.base)?;
    let tuples = spec.tuples();
    let results = parallel_map(&tuples, spec.jobs, |t| -> Result<RunSummary> {
        let cfg = spec.config_for(t);
        let run = train_on(&cfg, &corpus)?;
        if let Some(dir) = out {
            write_outputs(&dir.join(run_dir_name(t)), &cfg, &run)?;
        }
        summarize(*t, &run, &cfg)
    });
    let runs = results.into_iter().collect::<Result<Vec<_>>>()?;
    let divergent = runs
        .iter()
        .filter(|r| !is_usable(r))
        .map(|r| r.tuple)
        .collect();
    let report = SweepReport {
        best: select_best(&runs),
        runs,
        divergent,
    };
    if let Some(dir) = out {
        write_sweep_outputs(dir, &report)?;
    }
    Ok(report)
}

pub fn write_flops_csv<W: std::io::Write>(out: W, runs: &[RunSummary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Config(e.to_string());
    w.write_record([
        "method",
        "rank",
        "peak_lr",
        "seed",
        "flops",
        "flops_1e18",
        "val_ppl",
        "diverged",
    ])
    .map_err(csv_err)?;
    for r in runs {
        w.write_record([
            r.tuple.method.to_string(),
            r.tuple.rank.map_or(String::new(), |k| k.to_string()),
            r.tuple.peak_lr.to_string(),
            r.tuple.seed.to_string(),
            r.flops.to_string(),
            (r.flops as f64 / 1e18).to_string(),
            r.final_record.val_ppl.to_string(),
            r.diverged.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn format_best_table(best: &[MethodBest]) -> String {
    let mut s = format!(
        "{:<18} {:>5} {:>8} {:>10}\n",
        "method", "rank", "lr", "val_ppl"
    );
    for b in best {
        let rank = b.rank.map_or("-".to_string(), |r| r.to_string());
        s += &format!(
            "{:<18} {:>5} {:>8} {:>10.4}\n",
            b.method.name(),
            rank,
            b.peak_lr,
            b.val_ppl
        );
    }
    s
}

fn write_sweep_outputs(dir: &Path, report: &SweepReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_flops_csv(fs::File::create(dir.join("flops.csv"))?, &report.runs)?;
    fs::write(
        dir.join("sweep.json"),
        serde_json::to_string_pretty(report)? + "\n",
    )?;
    fs::write(dir.join("best.txt"), format_best_table(&report.best))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationArm {
    Neither,
    RefactorOnly,
    ResetOnly,
    Both,
}

impl AblationArm {
    pub const ALL: [AblationArm; 4] = [
        AblationArm::Neither,
        AblationArm::RefactorOnly,
        AblationArm::ResetOnly,
        AblationArm::Both,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationArm::Neither => "neither",
            AblationArm::RefactorOnly => "refactor-only",
            AblationArm::ResetOnly => "reset-only",
            AblationArm::Both => "both",
        }
    }

    pub fn flags(self) -> (bool, bool) {
        match self {
            AblationArm::Neither => (false, false),
            AblationArm::RefactorOnly => (true, false),
            AblationArm::ResetOnly => (false, true),
            AblationArm::Both => (true, true),
        }
    }
}

pub const ABLATION_LR: f64 = 0.003;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub arms: Vec<(AblationArm, RunOutput)>,
}

impl AblationReport {
    pub fn arm(&self, arm: AblationArm) -> &RunOutput {
        &self
            .arms
            .iter()
            .find(|(a, _)| *a == arm)
            .expect("all arms run")
            .1
    }
}

pub fn ablation_config(base: &TrainConfig, arm: AblationArm) -> TrainConfig {
    let (refactor, reset) = arm.flags();
    TrainConfig {
        peak_lr: ABLATION_LR,
        apply_refactor: Some(refactor),
        apply_momentum_reset: Some(reset),
        out_dir: None,
        ..base.clone()
    }
}

/// Runs the four restart arms from the same seed at the fixed ablation
/// learning rate.
pub fn run_ablation(base: &TrainConfig) -> Result<AblationReport> {
    run_ablation_with_corpus(base, &load_corpus(base)?)
}

pub fn run_ablation_with_corpus(base: &TrainConfig, corpus: &Corpus) -> Result<AblationReport> {
    if base.method.param_kind() == preopt::params::ParamKind::Full {
        return Err(Error::Config(format!(
            "{} has no factors to refactor",
            base.method
        )));
    }
    let mut arms = Vec::new();
    for arm in AblationArm::ALL {
        let cfg = ablation_config(base, arm);
        arms.push((arm, train_on(&cfg, corpus)?));
    }
    Ok(AblationReport { arms })
}

/// Long-format curves: one CSV per arm plus a combined file with an `arm` column.
pub fn write_ablation_outputs(dir: &Path, report: &AblationReport) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (arm, run) in &report.arms {
        let p = dir.join(format!("{}.csv", arm.name()));
        write_csv(fs::File::create(&p)?, &run.records)?;
        paths.push(p);
    }
    let combined = dir.join("ablation.csv");
    let mut w = csv::Writer::from_writer(fs::File::create(&combined)?);
    let csv_err = |e: csv::Error| Error::Config(e.to_string());
    w.write_record(["arm", "step", "val_ppl", "state_norm"])
        .map_err(csv_err)?;
    for (arm, run) in &report.arms {
        for r in &run.records {
            w.write_record([
                arm.name().to_string(),
                r.step.to_string(),
                r.val_ppl.to_string(),
                r.state_norm.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    paths.push(combined);
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::CorpusSource;

    fn base(steps: usize) -> TrainConfig {
        TrainConfig {
            total_steps: steps,
            corpus: CorpusSource::Synthetic {
                length: 4000,
                order: 1,
                seed: 2,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn single_tuple_report_is_the_run() {
        let spec = SweepSpec {
            base: base(60),
            methods: vec![TrainMethod::Lowrank],
            ranks: vec![4],
            lrs: vec![0.003],
            seeds: vec![5],
            jobs: 1,
        };
        let report = run_sweep(&spec).unwrap();
        let cfg = spec.config_for(&spec.tuples()[0]);
        let direct = crate::train::run_train(&cfg).unwrap();
        assert_eq!(report.best.len(), 1);
        assert_eq!(report.best[0].records, vec![direct.final_record.clone()]);
        assert_eq!(report.best[0].val_ppl, direct.final_record.val_ppl);
    }

    #[test]
    fn divergent_lr_is_excluded() {
        let spec = SweepSpec {
            base: base(80),
            methods: vec![TrainMethod::FullAdamw],
            ranks: vec![],
            lrs: vec![0.003, 1e6],
            seeds: vec![0],
            jobs: 2,
        };
        let report = run_sweep(&spec).unwrap();
        assert_eq!(report.divergent.len(), 1);
        assert_eq!(report.best[0].peak_lr, 0.003);
    }

    #[test]
    fn parallelism_does_not_change_runs() {
        let spec = SweepSpec {
            base: base(40),
            methods: vec![TrainMethod::Fira, TrainMethod::Sltrain],
            ranks: vec![4],
            lrs: vec![0.002, 0.005],
            seeds: vec![1, 2],
            jobs: 1,
        };
        let serial = run_sweep(&spec).unwrap();
        let parallel = run_sweep(&SweepSpec { jobs: 4, ..spec }).unwrap();
        assert_eq!(serial, parallel);
    }

    #[test]
    fn duplicate_seeds_rejected() {
        let spec = SweepSpec {
            seeds: vec![1, 1],
            ..SweepSpec::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn ablation_arms_share_start_and_reset_to_zero() {
        let mut cfg = base(420);
        cfg.method = TrainMethod::Lowrank;
        let report = run_ablation(&cfg).unwrap();
        let first = report.arm(AblationArm::Neither).records[0].clone();
        for (_, run) in &report.arms {
            assert_eq!(run.records[0], first);
        }
        let reset = report.arm(AblationArm::ResetOnly);
        let at: Vec<f64> = reset
            .records
            .iter()
            .filter(|r| r.step % 200 == 0 && r.step > 0)
            .map(|r| r.state_norm)
            .collect();
        assert_eq!(at, vec![0.0, 0.0]);
        assert_eq!(report.arm(AblationArm::Neither).restarts, 0);
    }
}
