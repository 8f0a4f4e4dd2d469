//! Acceptance run: prints one PASS/FAIL line per criterion.
//!
//! The process fails only when an outcome contradicts the documented
//! analysis; known negative results are still reported as FAIL lines.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use preopt::linalg::{thin_svd, Matrix, SeededRng};
use preopt::optim::{
    adamw_step, fira_step, galore_step, AdamHparams, AdamState, FiraState, GaLoreState,
};
use preopt::restart::{refactor_pair, RestartPolicy};
use preopt_cli::config::{TrainConfig, TrainMethod};
use preopt_cli::experiments::{directional_suite, ExperimentPlan, DIRECTIONAL_CLAIMS};
use preopt_cli::train::{load_corpus, Trainer};
use preopt_cli::verify::{gradient_suite, lemma1_suite, momentum_reset_suite, GRAD_TOLERANCE};
use serde_json::Value;

type Criterion = (&'static str, fn() -> Outcome);

const BIN: &str = env!("CARGO_BIN_EXE_preopt");

struct Outcome {
    passed: bool,
    /// Whether the outcome agrees with what the project documents.
    expected: bool,
    detail: String,
}

impl Outcome {
    fn strict(passed: bool, detail: String) -> Self {
        Self {
            passed,
            expected: passed,
            detail,
        }
    }
}

fn report(id: &str, start: Instant, o: &Outcome) -> bool {
    let status = if o.passed { "PASS" } else { "FAIL" };
    println!(
        "criterion {id}: {status} ({:.2}s) {}",
        start.elapsed().as_secs_f64(),
        o.detail
    );
    o.expected
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 0.01
}

fn memory_example() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("estimate.json");
    let start = Instant::now();
    let status = Command::new(BIN)
        .args(["estimate", "--json"])
        .arg(&json)
        .output()
        .unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    assert!(
        status.status.success(),
        "{}",
        String::from_utf8_lossy(&status.stderr)
    );
    let v: Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    let gb = &v["report_gb"];
    let got: Vec<f64> = ["weight", "gradient", "optimizer", "activation", "total"]
        .iter()
        .map(|k| gb[k].as_f64().unwrap())
        .collect();
    let want = [13.04, 13.04, 26.08, 24.13, 76.29];
    let elems = v["activation_elements"].as_u64().unwrap();
    let ok =
        got.iter().zip(want).all(|(&g, w)| close(g, w)) && elems == 12_957_253_632 && elapsed < 1.0;
    Outcome::strict(
        ok,
        format!("GB {got:.2?}, activation elements {elems}, {elapsed:.3}s"),
    )
}

fn byte_formulas() -> Outcome {
    // The fixture comes from an independent script; see core/tests/fixtures.
    let text = include_str!("../../core/tests/fixtures/memory_oracle.json");
    let v: Value = serde_json::from_str(text).unwrap();
    let mut mismatches = 0;
    let mut total = 0;
    for c in v["cases"].as_array().unwrap() {
        let u = |k: &str| c[k].as_u64().unwrap() as u128;
        for (name, want) in c["bytes"].as_object().unwrap() {
            let m = preopt::estimator::method_memory(
                name.parse().unwrap(),
                u("m"),
                u("n"),
                u("r"),
                c["delta"].as_f64().unwrap(),
                u("b"),
            )
            .unwrap();
            let got = [m.weight, m.activation, m.optimizer, m.gradient];
            let want: Vec<u128> = want
                .as_array()
                .unwrap()
                .iter()
                .map(|x| x.as_u64().unwrap() as u128)
                .collect();
            total += 1;
            if got[..] != want[..] {
                mismatches += 1;
            }
        }
    }
    let n = v["cases"].as_array().unwrap().len();
    Outcome::strict(
        mismatches == 0 && n == 50,
        format!("{n} tuples, {total} rows, {mismatches} mismatches"),
    )
}

fn gradients() -> Outcome {
    let seeds: Vec<u64> = (0..20).collect();
    let rows = gradient_suite(&seeds, 40).unwrap();
    let worst = rows
        .iter()
        .map(|r| r.max_relative_error)
        .fold(0.0, f64::max);
    let ok = rows.len() == 20 && rows.iter().all(|r| r.max_relative_error <= GRAD_TOLERANCE);
    Outcome::strict(ok, format!("20 networks, worst relative error {worst:.2e}"))
}

fn optimizer_oracles() -> Outcome {
    let hp = AdamHparams::default();
    let mut rng = SeededRng::new(4);
    let n = 6;
    let mut w_adam = Matrix::from_fn(n, n, |_, _| rng.normal());
    let mut w_gal = w_adam.clone();
    let mut adam = AdamState::new(n, n);
    let mut gal = GaLoreState::with_fixed_projection(n, n, Matrix::identity(n)).unwrap();
    for _ in 0..100 {
        let g = Matrix::from_fn(n, n, |_, _| rng.normal());
        adamw_step(&mut adam, &hp, 1e-2, &mut w_adam, &g).unwrap();
        galore_step(&mut gal, &hp, 1e-2, &mut w_gal, &g).unwrap();
    }
    let identity_diff = w_adam.max_abs_diff(&w_gal);

    let (m, k, r) = (9, 5, 2);
    // A coordinate subspace makes the residual exactly zero, not merely
    // zero up to rounding.
    let p = Matrix::identity(m).leading_columns(r);
    let mut w_g = Matrix::from_fn(m, k, |_, _| rng.normal());
    let mut w_f = w_g.clone();
    let mut g_state = GaLoreState::with_fixed_projection(m, k, p.clone()).unwrap();
    let mut f_state =
        FiraState::from_galore(GaLoreState::with_fixed_projection(m, k, p.clone()).unwrap());
    for _ in 0..100 {
        let g = p
            .matmul(&Matrix::from_fn(r, k, |_, _| rng.normal()))
            .unwrap();
        galore_step(&mut g_state, &hp, 1e-2, &mut w_g, &g).unwrap();
        fira_step(&mut f_state, &hp, 1e-2, &mut w_f, &g).unwrap();
    }
    let fira_diff = w_g.max_abs_diff(&w_f);
    Outcome::strict(
        identity_diff <= 1e-12 && fira_diff == 0.0,
        format!("identity-projection GaLore vs AdamW {identity_diff:.1e}, zero-residual Fira vs GaLore {fira_diff:.1e}"),
    )
}

fn lemma1() -> Outcome {
    let seeds: Vec<u64> = (0..20).collect();
    let s = lemma1_suite(&seeds).unwrap();
    let failures = s.alpha_failures();
    // A balanced split is only optimal when the product of the extreme
    // singular values is at least one; every miss must be such an instance.
    let explained = failures.iter().all(|r| r.sigma_max * r.sigma_min < 1.0);
    let worst_fd = s.hessian.iter().map(|h| h.max_abs_diff).fold(0.0, f64::max);
    let detail = format!(
        "bound violations {}, alpha=1/2 optimal on {}/{} (misses at seeds {:?}, all with sigma_max*sigma_min < 1: {explained}), Hessian fd {worst_fd:.1e}",
        s.bounds.violations(),
        s.alpha.len() - failures.len(),
        s.alpha.len(),
        failures.iter().map(|r| r.seed).collect::<Vec<_>>()
    );
    Outcome {
        passed: s.passed(),
        expected: s.bounds_pass && s.symmetry_pass && s.hessian_pass && explained,
        detail,
    }
}

fn theorems() -> Outcome {
    let s = momentum_reset_suite().unwrap();
    let held = s.theorems.iter().filter(|t| t.holds()).count();
    Outcome::strict(
        s.theorems_pass(),
        format!(
            "{held}/{} quadratic and least-squares instances within both bounds",
            s.theorems.len()
        ),
    )
}

fn refactorization() -> Outcome {
    let mut worst_product: f64 = 0.0;
    let mut worst_sigma: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = SeededRng::new(seed);
        let (m, n) = (3 + rng.below(10), 3 + rng.below(10));
        let r = 1 + rng.below(m.min(n));
        let scale = rng.uniform(0.1, 5.0);
        let b = Matrix::from_fn(m, r, |_, _| scale * rng.normal());
        let a = Matrix::from_fn(r, n, |_, _| rng.normal() / scale);
        let w = b.matmul(&a).unwrap();
        let (b2, a2) = refactor_pair(&b, &a).unwrap();
        let rel = b2.matmul(&a2).unwrap().sub(&w).unwrap().frobenius_norm() / w.frobenius_norm();
        worst_product = worst_product.max(rel);
        let target: Vec<f64> = thin_svd(&w).unwrap().sigma[..r]
            .iter()
            .map(|s| s.sqrt())
            .collect();
        for f in [&b2, &a2] {
            let got = thin_svd(f).unwrap().sigma;
            for (g, t) in got.iter().zip(&target) {
                worst_sigma = worst_sigma.max((g - t).abs());
            }
        }
    }

    let cfg = TrainConfig {
        method: TrainMethod::Lowrank,
        total_steps: 200,
        restart_period: 100,
        apply_refactor: Some(true),
        apply_momentum_reset: Some(false),
        rewarmup_steps: Some(0),
        ..TrainConfig::default()
    };
    let corpus = load_corpus(&cfg).unwrap();
    let mut trainer = Trainer::new(&cfg).unwrap();
    let mut rng = SeededRng::new(9);
    for step in 0..100 {
        let batch = corpus
            .sample_batch(cfg.batch_size, cfg.net.context_len, &mut rng)
            .unwrap();
        trainer.update(step, &batch).unwrap();
    }
    let before = trainer.net.validation_nll(&corpus).unwrap();
    assert_eq!(
        trainer.policy,
        RestartPolicy {
            period: 100,
            apply_refactor: true,
            apply_momentum_reset: false,
            rewarmup_steps: 0,
            reset_counter: true
        }
    );
    assert!(trainer.maybe_restart(100).unwrap());
    let after = trainer.net.validation_nll(&corpus).unwrap();
    let loss_diff = (after - before).abs();
    Outcome::strict(
        worst_product <= 1e-8 && worst_sigma <= 1e-8 && loss_diff <= 1e-9,
        format!("product rel err {worst_product:.1e}, factor singular values vs sqrt(sigma) {worst_sigma:.1e}, validation loss change {loss_diff:.1e}"),
    )
}

fn directional() -> Vec<(String, Outcome)> {
    let report = directional_suite(
        &TrainConfig::default(),
        &DIRECTIONAL_CLAIMS,
        ExperimentPlan::default(),
    )
    .unwrap();
    let lrs: Vec<String> = report
        .lr_choices
        .iter()
        .map(|c| format!("{}={}", c.method, c.peak_lr))
        .collect();
    println!("  selected learning rates: {}", lrs.join(" "));
    report
        .outcomes
        .iter()
        .zip(["8a", "8b", "8c", "8d"])
        .map(|(o, id)| {
            let mean = |f: fn(&(u64, f64, f64)) -> f64| {
                o.per_seed.iter().map(f).sum::<f64>() / o.per_seed.len() as f64
            };
            let detail = format!(
                "{}: {}/{} seeds (need {}), mean ppl {:.3} vs {:.3}",
                o.claim.label,
                o.wins,
                o.per_seed.len(),
                o.claim.wins_required,
                mean(|x| x.1),
                mean(|x| x.2)
            );
            let finite = o
                .per_seed
                .iter()
                .all(|(_, c, b)| c.is_finite() && b.is_finite());
            // Claims about restarts and resets are documented negative
            // results at this scale; the other two must hold.
            let expected = finite && (o.passed || matches!(id, "8c" | "8d"));
            (
                id.to_string(),
                Outcome {
                    passed: o.passed,
                    expected,
                    detail,
                },
            )
        })
        .collect()
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    // Same directory both times so the recorded config is identical too.
    let out = root.path().join("run");
    for _ in 0..2 {
        let _ = fs::remove_dir_all(&out);
        let status = Command::new(BIN)
            .args([
                "train",
                "--method",
                "sltrain-restarts",
                "--total-steps",
                "300",
                "--restart-period",
                "100",
                "--seed",
                "5",
                "--out",
            ])
            .arg(&out)
            .env_remove("PREOPT_SEED")
            .output()
            .unwrap();
        assert!(
            status.status.success(),
            "{}",
            String::from_utf8_lossy(&status.stderr)
        );
        runs.push(read_all(&out));
    }
    let names: Vec<&str> = runs[0].iter().map(|(n, _)| n.as_str()).collect();
    Outcome::strict(
        runs[0] == runs[1] && names.len() >= 3,
        format!("files {names:?} byte-identical: {}", runs[0] == runs[1]),
    )
}

fn main() {
    let mut consistent = true;
    let cases: [Criterion; 7] = [
        ("1", memory_example),
        ("2", byte_formulas),
        ("3", gradients),
        ("4", optimizer_oracles),
        ("5", lemma1),
        ("6", theorems),
        ("7", refactorization),
    ];
    for (id, f) in cases {
        let start = Instant::now();
        consistent &= report(id, start, &f());
    }
    let start = Instant::now();
    for (id, o) in directional() {
        consistent &= report(&id, start, &o);
    }
    let start = Instant::now();
    consistent &= report("9", start, &determinism());
    if !consistent {
        eprintln!("acceptance outcomes deviate from the documented results");
        std::process::exit(1);
    }
}
