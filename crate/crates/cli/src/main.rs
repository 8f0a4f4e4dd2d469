use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use preopt::estimator::{
    activation_elements, activation_elements_simplified, flops, method_memory_with, to_gib,
    total_memory_report, ArchSpec, GradConvention, Method,
};
use preopt_cli::config::{CorpusSource, TrainConfig, TrainMethod};
use preopt_cli::sweep::{
    format_best_table, run_ablation, run_sweep_into, write_ablation_outputs, SweepSpec,
};
use preopt_cli::train::{run_train, write_outputs};
use preopt_cli::verify::{gradient_suite, lemma1_suite, momentum_reset_suite, GRAD_TOLERANCE};
use serde::Serialize;

const EXIT_USAGE: u8 = 1;
const EXIT_DIVERGED: u8 = 2;
const EXIT_INVARIANT: u8 = 3;

#[derive(Parser)]
#[command(
    name = "preopt",
    version,
    about = "Desk-scale low-rank pre-training laboratory"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write its metrics.
    Train(TrainArgs),
    /// Run a grid of configurations and select the best learning rate per method.
    Sweep(SweepArgs),
    /// Run the four restart-ablation arms at the fixed ablation learning rate.
    Ablate(TrainArgs),
    /// Memory and compute estimates.
    Estimate(EstimateArgs),
    /// Numerical invariant suites.
    Verify {
        #[command(subcommand)]
        suite: VerifySuite,
    },
    /// Compare analytic network gradients with central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Default)]
struct TrainArgs {
    /// JSON configuration file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<TrainMethodArg>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    peak_lr: Option<f64>,
    #[arg(long)]
    total_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    restart_period: Option<usize>,
    #[arg(long)]
    rewarmup_steps: Option<usize>,
    #[arg(long)]
    apply_refactor: Option<bool>,
    #[arg(long)]
    apply_momentum_reset: Option<bool>,
    #[arg(long)]
    clip: Option<bool>,
    #[arg(long)]
    galore_period: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Whitespace-separated integer token file used instead of a synthetic corpus.
    #[arg(long)]
    corpus_file: Option<PathBuf>,
    #[arg(long)]
    corpus_length: Option<usize>,
    #[arg(long)]
    corpus_order: Option<usize>,
    #[arg(long)]
    corpus_seed: Option<u64>,
    /// Output directory for metrics files.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainMethodArg {
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

impl From<TrainMethodArg> for TrainMethod {
    fn from(m: TrainMethodArg) -> Self {
        match m {
            TrainMethodArg::FullAdamw => TrainMethod::FullAdamw,
            TrainMethodArg::FullStablespam => TrainMethod::FullStablespam,
            TrainMethodArg::Lowrank => TrainMethod::Lowrank,
            TrainMethodArg::Lora => TrainMethod::Lora,
            TrainMethodArg::Sltrain => TrainMethod::Sltrain,
            TrainMethodArg::Galore => TrainMethod::Galore,
            TrainMethodArg::Fira => TrainMethod::Fira,
            TrainMethodArg::LowrankRestarts => TrainMethod::LowrankRestarts,
            TrainMethodArg::SltrainRestarts => TrainMethod::SltrainRestarts,
        }
    }
}

impl TrainArgs {
    fn build(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text =
                    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => TrainConfig::default(),
        };
        self.apply(&mut cfg);
        cfg.apply_seed_env()?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(m) = self.method {
            cfg.method = m.into();
        }
        if self.rank.is_some() {
            cfg.rank = self.rank;
        }
        if self.delta.is_some() {
            cfg.delta = self.delta;
        }
        if self.rewarmup_steps.is_some() {
            cfg.rewarmup_steps = self.rewarmup_steps;
        }
        if self.apply_refactor.is_some() {
            cfg.apply_refactor = self.apply_refactor;
        }
        if self.apply_momentum_reset.is_some() {
            cfg.apply_momentum_reset = self.apply_momentum_reset;
        }
        if self.clip.is_some() {
            cfg.clip = self.clip;
        }
        macro_rules! set {
            ($($field:ident),*) => {$(if let Some(v) = self.$field { cfg.$field = v; })*};
        }
        set!(
            peak_lr,
            total_steps,
            batch_size,
            seed,
            restart_period,
            galore_period,
            eval_every
        );
        if let Some(p) = &self.corpus_file {
            cfg.corpus = CorpusSource::File(p.clone());
        } else if let CorpusSource::Synthetic {
            length,
            order,
            seed,
        } = &mut cfg.corpus
        {
            if let Some(v) = self.corpus_length {
                *length = v;
            }
            if let Some(v) = self.corpus_order {
                *order = v;
            }
            if let Some(v) = self.corpus_seed {
                *seed = v;
            }
        }
        if self.out.is_some() {
            cfg.out_dir = self.out.clone();
        }
    }
}

#[derive(Args)]
struct SweepArgs {
    /// JSON sweep specification; flags override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<TrainMethodArg>>,
    #[arg(long, value_delimiter = ',')]
    ranks: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    lrs: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Worker threads; 0 uses all cores.
    #[arg(long)]
    jobs: Option<usize>,
    #[command(flatten)]
    base: TrainArgs,
}

#[derive(Args)]
struct EstimateArgs {
    /// Architecture preset.
    #[arg(long, default_value = "llama-7b")]
    preset: Preset,
    #[arg(long)]
    b: Option<u128>,
    #[arg(long)]
    s: Option<u128>,
    #[arg(long)]
    h: Option<u128>,
    #[arg(long)]
    l: Option<u128>,
    #[arg(long)]
    a: Option<u128>,
    #[arg(long)]
    k: Option<u128>,
    #[arg(long)]
    v: Option<u128>,
    #[arg(long)]
    n_params: Option<u128>,
    #[arg(long)]
    n_nonembed: Option<u128>,
    /// JSON architecture file with the same field names.
    #[arg(long)]
    arch: Option<PathBuf>,
    #[arg(long, default_value = "full")]
    method: String,
    #[arg(long, default_value_t = 0)]
    rank: u128,
    #[arg(long, default_value_t = 0.0)]
    delta: f64,
    #[arg(long, default_value = "worked-example")]
    convention: ConventionArg,
    /// Per-matrix estimate for an `MxN` weight instead of the whole model.
    #[arg(long)]
    matrix: Option<String>,
    /// Training steps for the compute estimate (tokens = b·s·steps).
    #[arg(long)]
    steps: Option<u128>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    #[value(name = "llama-7b")]
    Llama7b,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConventionArg {
    PerMatrix,
    WorkedExample,
}

#[derive(Subcommand)]
enum VerifySuite {
    /// Conditioning bounds, balance-optimal splits and Hessian assembly.
    Lemma1 {
        #[arg(long, default_value_t = 20)]
        instances: u64,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Reset semantics and convergence bounds for momentum with restarts.
    MomentumReset {
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    /// Coordinates sampled per tensor.
    #[arg(long, default_value_t = 40)]
    coords: usize,
    #[arg(long)]
    json: Option<PathBuf>,
}

fn emit_json<T: Serialize>(value: &T, path: Option<&PathBuf>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn mark(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn cmd_train(args: &TrainArgs) -> Result<u8> {
    let cfg = args.build()?;
    let out = run_train(&cfg)?;
    println!("{}", serde_json::to_string(&out.final_record)?);
    Ok(if out.diverged { EXIT_DIVERGED } else { 0 })
}

fn cmd_sweep(args: &SweepArgs) -> Result<u8> {
    let mut spec: SweepSpec = match &args.spec {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => SweepSpec::default(),
    };
    args.base.apply(&mut spec.base);
    spec.base.apply_seed_env()?;
    if let Some(m) = &args.methods {
        spec.methods = m.iter().map(|&x| x.into()).collect();
    }
    if let Some(r) = &args.ranks {
        spec.ranks = r.clone();
    }
    if let Some(l) = &args.lrs {
        spec.lrs = l.clone();
    }
    if let Some(s) = &args.seeds {
        spec.seeds = s.clone();
    }
    if let Some(j) = args.jobs {
        spec.jobs = j;
    }
    let out = spec.base.out_dir.clone();
    let report = run_sweep_into(&spec, out.as_deref())?;
    print!("{}", format_best_table(&report.best));
    for t in &report.divergent {
        println!(
            "diverged: {} rank {:?} lr {} seed {}",
            t.method, t.rank, t.peak_lr, t.seed
        );
    }
    Ok(if report.divergent.is_empty() {
        0
    } else {
        EXIT_DIVERGED
    })
}

fn cmd_ablate(args: &TrainArgs) -> Result<u8> {
    let mut cfg = args.build()?;
    if args.method.is_none() && args.config.is_none() {
        cfg.method = TrainMethod::Lowrank;
        cfg.validate()?;
    }
    let report = run_ablation(&cfg)?;
    println!("{:<14} {:>10} {:>9}", "arm", "val_ppl", "restarts");
    for (arm, run) in &report.arms {
        println!(
            "{:<14} {:>10.4} {:>9}",
            arm.name(),
            run.final_record.val_ppl,
            run.restarts
        );
    }
    if let Some(dir) = &cfg.out_dir {
        write_ablation_outputs(dir, &report)?;
        for (arm, run) in &report.arms {
            let arm_cfg = preopt_cli::sweep::ablation_config(&cfg, *arm);
            write_outputs(&dir.join(arm.name()), &arm_cfg, run)?;
        }
    }
    let diverged = report.arms.iter().any(|(_, r)| r.diverged);
    Ok(if diverged { EXIT_DIVERGED } else { 0 })
}

#[derive(Serialize)]
struct EstimateJson {
    arch: Option<ArchSpec>,
    method: String,
    rank: u128,
    delta: f64,
    convention: GradConvention,
    matrix: Option<preopt::estimator::MatrixMemory>,
    report: Option<preopt::estimator::MemoryReport>,
    report_gb: Option<preopt::estimator::MemoryReportGb>,
    activation_elements: Option<u128>,
    activation_elements_simplified: Option<u128>,
    flops: Option<u128>,
}

fn cmd_estimate(args: &EstimateArgs) -> Result<u8> {
    let method: Method = args.method.parse()?;
    let convention = match args.convention {
        ConventionArg::PerMatrix => GradConvention::PerMatrix,
        ConventionArg::WorkedExample => GradConvention::WorkedExample,
    };
    let mut json = EstimateJson {
        arch: None,
        method: method.to_string(),
        rank: args.rank,
        delta: args.delta,
        convention,
        matrix: None,
        report: None,
        report_gb: None,
        activation_elements: None,
        activation_elements_simplified: None,
        flops: None,
    };
    if let Some(dims) = &args.matrix {
        let (m, n) = dims
            .split_once(['x', 'X'])
            .and_then(|(m, n)| Some((m.parse::<u128>().ok()?, n.parse::<u128>().ok()?)))
            .context("--matrix expects MxN")?;
        let b = args.b.unwrap_or(1);
        let mem = method_memory_with(method, m, n, args.rank, args.delta, b, convention)?;
        println!("{:<12} {:>16}", "category", "bytes");
        for (name, v) in [
            ("weight", mem.weight),
            ("activation", mem.activation),
            ("optimizer", mem.optimizer),
            ("gradient", mem.gradient),
            ("total", mem.total()),
        ] {
            println!("{name:<12} {v:>16}");
        }
        json.matrix = Some(mem);
    } else {
        let mut spec = match &args.arch {
            Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
                .with_context(|| format!("parsing {}", p.display()))?,
            None => match args.preset {
                Preset::Llama7b => ArchSpec::llama_7b(),
            },
        };
        macro_rules! set {
            ($($field:ident),*) => {$(if let Some(v) = args.$field { spec.$field = v; })*};
        }
        set!(b, s, h, l, a, k, v, n_params, n_nonembed);
        let report = total_memory_report(&spec, method, args.rank, args.delta, convention)?;
        let gb = report.gb();
        println!("{:<12} {:>16} {:>10}", "category", "bytes", "GB");
        for (name, bytes, g) in [
            ("weight", report.weight_bytes, gb.weight),
            ("gradient", report.gradient_bytes, gb.gradient),
            ("optimizer", report.optimizer_bytes, gb.optimizer),
            ("activation", report.activation_bytes, gb.activation),
            ("total", report.total_bytes, gb.total),
        ] {
            println!("{name:<12} {bytes:>16} {g:>10.2}");
        }
        let elems = activation_elements(&spec)?;
        println!("activation elements: {elems}");
        json.activation_elements = Some(elems);
        json.activation_elements_simplified = Some(activation_elements_simplified(&spec)?);
        if let Some(steps) = args.steps {
            let c = flops(spec.n_nonembed, spec.b * spec.s, steps)?;
            println!("compute: {c} FLOPs ({:.4}e18)", c as f64 / 1e18);
            json.flops = Some(c);
        }
        json.arch = Some(spec);
        json.report = Some(report);
        json.report_gb = Some(gb);
        debug_assert!((to_gib(report.total_bytes) - gb.total).abs() < 1e-12);
    }
    match &args.json {
        Some(p) => emit_json(&json, Some(p))?,
        None => {
            println!();
            emit_json(&json, None)?;
        }
    }
    Ok(0)
}

fn cmd_verify(suite: &VerifySuite) -> Result<u8> {
    match suite {
        VerifySuite::Lemma1 { instances, json } => {
            let seeds: Vec<u64> = (0..*instances).collect();
            let s = lemma1_suite(&seeds)?;
            println!(
                "{:<6} {:>9} {:>12} {:>12} {:>12} {:>8} {:>10} {:>9}",
                "seed", "shape", "kappa", "lower", "upper", "bounds", "argmin_a", "fd_diff"
            );
            for ((b, a), h) in s.bounds.rows.iter().zip(&s.alpha).zip(&s.hessian) {
                let shape = format!("{}x{}r{}", b.shape.0, b.shape.1, b.shape.2);
                println!(
                    "{:<6} {:>9} {:>12.5e} {:>12.5e} {:>12.5e} {:>8} {:>10.2} {:>9.2e}",
                    b.seed,
                    shape,
                    b.kappa,
                    b.lower,
                    b.upper,
                    mark(!b.violated),
                    a.argmin_alpha,
                    h.max_abs_diff
                );
            }
            println!("bounds        {}", mark(s.bounds_pass));
            println!("alpha = 1/2   {}", mark(s.alpha_pass));
            println!("symmetry      {}", mark(s.symmetry_pass));
            println!("hessian fd    {}", mark(s.hessian_pass));
            for r in s.alpha_failures() {
                println!(
                    "  seed {}: grid minimum at alpha {} (sigma_max*sigma_min = {:.4})",
                    r.seed,
                    r.argmin_alpha,
                    r.sigma_max * r.sigma_min
                );
            }
            if let Some(p) = json {
                emit_json(&s, Some(p))?;
            }
            Ok(if s.passed() { 0 } else { EXIT_INVARIANT })
        }
        VerifySuite::MomentumReset { json } => {
            let s = momentum_reset_suite()?;
            for c in &s.resets {
                println!("{:<24} {:>10.3e} {}", c.name, c.value, mark(c.passed));
            }
            println!(
                "{:<14} {:>5} {:>12} {:>12} {:>12} {:>12}",
                "family", "seed", "sgdm", "bound1", "sgdmr", "bound2"
            );
            for t in &s.theorems {
                let r = &t.report;
                println!(
                    "{:<14} {:>5} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e} {}",
                    t.family,
                    t.instance_seed,
                    r.sgdm_mean_subopt,
                    r.sgdm_bound,
                    r.sgdmr_mean_subopt,
                    r.sgdmr_bound,
                    mark(t.holds())
                );
            }
            println!(
                "restarted run lower in {}/{} paired seeds (need {})",
                s.sgdmr_wins,
                s.comparison.seeds.len(),
                s.wins_required
            );
            println!("overall {}", mark(s.passed()));
            if let Some(p) = json {
                emit_json(&s, Some(p))?;
            }
            Ok(if s.passed() { 0 } else { EXIT_INVARIANT })
        }
    }
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<u8> {
    let seeds: Vec<u64> = (0..args.seeds).collect();
    let rows = gradient_suite(&seeds, args.coords)?;
    println!(
        "{:<6} {:<9} {:>12} {:>7}",
        "seed", "kind", "rel_err", "coords"
    );
    for r in &rows {
        println!(
            "{:<6} {:<9} {:>12.3e} {:>7} {}",
            r.seed,
            format!("{:?}", r.kind),
            r.max_relative_error,
            r.coordinates,
            mark(r.max_relative_error <= GRAD_TOLERANCE)
        );
    }
    if let Some(p) = &args.json {
        emit_json(&rows, Some(p))?;
    }
    Ok(
        if rows.iter().all(|r| r.max_relative_error <= GRAD_TOLERANCE) {
            0
        } else {
            EXIT_INVARIANT
        },
    )
}

fn is_usage_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<preopt::Error>().is_some_and(|p| {
            matches!(
                p,
                preopt::Error::Config(_)
                    | preopt::Error::InvalidArgument(_)
                    | preopt::Error::Json(_)
                    | preopt::Error::Rank { .. }
            )
        }) || c.downcast_ref::<serde_json::Error>().is_some()
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Verify { suite } => cmd_verify(suite),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_usage_error(&e) {
                EXIT_USAGE
            } else {
                EXIT_INVARIANT
            })
        }
    }
}
