//! Invariant suites behind the `verify` and `gradcheck` subcommands.

use preopt::linalg::{thin_svd, Matrix, SeededRng};
use preopt::net::{generate_markov_corpus, gradcheck, NetConfig, TinyNet};
use preopt::optim::{
    adamw_step, fira_step, galore_step, AdamHparams, AdamState, CounterMode, FiraState,
    GaLoreState, MomentumReset,
};
use preopt::params::ParamKind;
use preopt::theory::{
    alpha_balance_sweep, convergence_experiment, finite_difference_hessian, parameter_hessian,
    verify_lemma1_bounds, ConvergenceReport, ExperimentSettings, FiniteSumProblem, Lemma1Instance,
    Lemma1Report,
};
use preopt::Result;
use serde::Serialize;

pub const LEMMA_SLACK: f64 = 1e-8;
pub const HESSIAN_TOLERANCE: f64 = 1e-6;
pub const GRAD_TOLERANCE: f64 = 1e-5;

/// `α ∈ {0, 0.05, …, 1}`.
pub fn alpha_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct AlphaRow {
    pub seed: u64,
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub ratio_at_half: f64,
    pub grid_min: f64,
    pub argmin_alpha: f64,
    pub min_at_half: bool,
    /// Largest `|ratio(α) − ratio(1−α)|` relative to `ratio(α)`.
    pub symmetry_defect: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct HessianRow {
    pub seed: u64,
    pub max_abs_diff: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Lemma1Suite {
    pub bounds: Lemma1Report,
    pub alpha: Vec<AlphaRow>,
    pub hessian: Vec<HessianRow>,
    pub bounds_pass: bool,
    pub alpha_pass: bool,
    pub symmetry_pass: bool,
    pub hessian_pass: bool,
}

impl Lemma1Suite {
    pub fn passed(&self) -> bool {
        self.bounds_pass && self.alpha_pass && self.symmetry_pass && self.hessian_pass
    }

    pub fn alpha_failures(&self) -> Vec<&AlphaRow> {
        self.alpha.iter().filter(|r| !r.min_at_half).collect()
    }
}

pub fn lemma1_suite(seeds: &[u64]) -> Result<Lemma1Suite> {
    let instances = seeds
        .iter()
        .map(|&s| Lemma1Instance::random(s))
        .collect::<Result<Vec<_>>>()?;
    let bounds = verify_lemma1_bounds(&instances, LEMMA_SLACK)?;
    let grid = alpha_grid();
    let half = grid.len() / 2;
    let mut alpha = Vec::new();
    let mut hessian = Vec::new();
    for inst in &instances {
        let w = inst.b.matmul(&inst.a)?;
        let sigma = thin_svd(&w)?.sigma;
        let ratios = alpha_balance_sweep(&w, &grid)?;
        let (argmin, grid_min) =
            ratios
                .iter()
                .enumerate()
                .fold(
                    (0, f64::INFINITY),
                    |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) },
                );
        let symmetry_defect = (0..grid.len())
            .map(|i| (ratios[i] - ratios[grid.len() - 1 - i]).abs() / ratios[i])
            .fold(0.0, f64::max);
        alpha.push(AlphaRow {
            seed: inst.seed,
            sigma_max: sigma[0],
            sigma_min: *sigma.last().expect("non-empty"),
            ratio_at_half: ratios[half],
            grid_min,
            argmin_alpha: grid[argmin],
            min_at_half: ratios[half] <= grid_min * (1.0 + 1e-12),
            symmetry_defect,
        });
        let exact = parameter_hessian(&inst.b, &inst.a, &inst.loss)?;
        let fd = finite_difference_hessian(&inst.b, &inst.a, &inst.loss, 1e-4)?;
        hessian.push(HessianRow {
            seed: inst.seed,
            max_abs_diff: exact.max_abs_diff(&fd),
        });
    }
    Ok(Lemma1Suite {
        bounds_pass: bounds.violations() == 0,
        alpha_pass: alpha.iter().all(|r| r.min_at_half),
        symmetry_pass: alpha.iter().all(|r| r.symmetry_defect <= 1e-12),
        hessian_pass: hessian.iter().all(|r| r.max_abs_diff <= HESSIAN_TOLERANCE),
        bounds,
        alpha,
        hessian,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TheoremRow {
    pub family: &'static str,
    pub instance_seed: u64,
    pub report: ConvergenceReport,
}

impl TheoremRow {
    pub fn holds(&self) -> bool {
        self.report.theorem1_holds && self.report.theorem2_holds && self.report.proof_indexing_holds
    }
}

fn random_spd(d: usize, lo: f64, hi: f64, rng: &mut SeededRng) -> Result<Matrix> {
    let q = thin_svd(&Matrix::from_fn(d, d, |_, _| rng.normal()))?.u;
    let eig: Vec<f64> = (0..d).map(|_| rng.uniform(lo, hi)).collect();
    q.matmul(&Matrix::diag(&eig))?.matmul_t(&q)
}

fn settings_for(
    problem: &FiniteSumProblem,
    t_inner: usize,
    k_blocks: usize,
) -> Result<ExperimentSettings> {
    Ok(ExperimentSettings {
        eta: 1.0 / (4.0 * problem.lipschitz()?),
        t_inner,
        k_blocks,
        counter: CounterMode::Global,
    })
}

/// Bound checks over deterministic quadratics and stochastic least squares,
/// one instance per seed in `instance_seeds`, each averaged over `run_seeds`.
pub fn theorem_suite(instance_seeds: &[u64], run_seeds: &[u64]) -> Result<Vec<TheoremRow>> {
    let mut rows = Vec::new();
    for &s in instance_seeds {
        let mut rng = SeededRng::with_stream(s, 7);
        let d = 4;
        let q = random_spd(d, 0.2, 1.0, &mut rng)?;
        let c = Matrix::from_fn(d, 1, |_, _| rng.normal());
        let quad = FiniteSumProblem::quadratic(q, c)?;
        let report = convergence_experiment(
            &quad,
            &Matrix::zeros(d, 1),
            settings_for(&quad, 50, 4)?,
            &[s],
        )?;
        rows.push(TheoremRow {
            family: "quadratic",
            instance_seed: s,
            report,
        });

        let ls = FiniteSumProblem::gaussian_least_squares(20, 8, &mut rng)?;
        let report = convergence_experiment(
            &ls,
            &Matrix::zeros(8, 1),
            settings_for(&ls, 100, 5)?,
            run_seeds,
        )?;
        rows.push(TheoremRow {
            family: "least-squares",
            instance_seed: s,
            report,
        });
    }
    Ok(rows)
}

/// Paired SGD-M vs SGD-M-R on an interpolating least-squares problem.
pub fn restart_comparison(seeds: &[u64]) -> Result<ConvergenceReport> {
    let problem = FiniteSumProblem::orthonormal_least_squares(50, 100, &mut SeededRng::new(11))?;
    let settings = settings_for(&problem, 400, 5)?;
    convergence_experiment(&problem, &Matrix::zeros(100, 1), settings, seeds)
}

#[derive(Debug, Clone, Serialize)]
pub struct ResetCheck {
    pub name: &'static str,
    pub value: f64,
    pub passed: bool,
}

/// Zeroed moments after a reset, and fresh-start equivalence of the first
/// post-reset step.
pub fn reset_checks() -> Result<Vec<ResetCheck>> {
    let mut rng = SeededRng::new(3);
    let w0 = Matrix::from_fn(6, 4, |_, _| rng.normal());
    let grads: Vec<Matrix> = (0..5)
        .map(|_| Matrix::from_fn(6, 4, |_, _| rng.normal()))
        .collect();
    let hp = AdamHparams::default();
    let mut out = Vec::new();

    let mut adam = AdamState::new(6, 4);
    let mut galore = GaLoreState::new(6, 4, 2, 3)?;
    let mut fira = FiraState::new(6, 4, 2, 3)?;
    let (mut wa, mut wg, mut wf) = (w0.clone(), w0.clone(), w0.clone());
    for g in &grads[..4] {
        adamw_step(&mut adam, &hp, 1e-2, &mut wa, g)?;
        galore_step(&mut galore, &hp, 1e-2, &mut wg, g)?;
        fira_step(&mut fira, &hp, 1e-2, &mut wf, g)?;
    }
    let states: [(&'static str, &mut dyn MomentumReset); 3] = [
        ("adam", &mut adam),
        ("galore", &mut galore),
        ("fira", &mut fira),
    ];
    for (name, s) in states {
        let before = s.state_sq_norm();
        s.reset_momentum(true);
        let after = s.state_sq_norm();
        out.push(ResetCheck {
            name,
            value: after,
            passed: before > 0.0 && after == 0.0,
        });
    }

    let mut fresh = AdamState::new(6, 4);
    let mut w_fresh = wa.clone();
    adamw_step(&mut fresh, &hp, 1e-2, &mut w_fresh, &grads[4])?;
    adamw_step(&mut adam, &hp, 1e-2, &mut wa, &grads[4])?;
    let diff = wa.max_abs_diff(&w_fresh);
    out.push(ResetCheck {
        name: "adam-fresh-equivalence",
        value: diff,
        passed: diff == 0.0,
    });
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentumResetSuite {
    pub resets: Vec<ResetCheck>,
    pub theorems: Vec<TheoremRow>,
    pub comparison: ConvergenceReport,
    pub sgdmr_wins: usize,
    pub wins_required: usize,
}

impl MomentumResetSuite {
    pub fn theorems_pass(&self) -> bool {
        self.theorems.iter().all(TheoremRow::holds)
    }

    pub fn passed(&self) -> bool {
        self.resets.iter().all(|c| c.passed)
            && self.theorems_pass()
            && self.comparison.theorem1_holds
            && self.comparison.theorem2_holds
            && self.sgdmr_wins >= self.wins_required
    }
}

pub fn momentum_reset_suite() -> Result<MomentumResetSuite> {
    let seeds: Vec<u64> = (0..20).collect();
    let comparison = restart_comparison(&seeds[..10])?;
    Ok(MomentumResetSuite {
        resets: reset_checks()?,
        theorems: theorem_suite(&seeds, &seeds)?,
        sgdmr_wins: comparison.sgdmr_wins,
        wins_required: 8,
        comparison,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct GradRow {
    pub seed: u64,
    pub kind: ParamKind,
    pub max_relative_error: f64,
    pub coordinates: usize,
}

/// Central-difference checks on randomly initialised default-size networks,
/// cycling through the parameterizations.
pub fn gradient_suite(seeds: &[u64], coords_per_tensor: usize) -> Result<Vec<GradRow>> {
    let kinds = [
        ParamKind::Full,
        ParamKind::LowRank,
        ParamKind::Lora,
        ParamKind::SlTrain,
    ];
    let config = NetConfig::default();
    let corpus = generate_markov_corpus(config.vocab, 4000, 1, &mut SeededRng::new(2))?;
    let mut rows = Vec::new();
    for &seed in seeds {
        let kind = kinds[(seed % 4) as usize];
        let mut rng = SeededRng::new(seed);
        let net = TinyNet::init(config, kind, 4, 0.05, &mut rng)?;
        let batch = corpus.sample_batch(8, config.context_len, &mut rng)?;
        let check = gradcheck(&net, &batch, 1e-5, Some(coords_per_tensor), &mut rng)?;
        rows.push(GradRow {
            seed,
            kind,
            max_relative_error: check.max_relative_error,
            coordinates: check.coordinates_checked,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reset_checks_pass() {
        assert!(reset_checks().unwrap().iter().all(|c| c.passed));
    }

    #[test]
    fn alpha_grid_is_symmetric_with_half_in_the_middle() {
        let g = alpha_grid();
        assert_eq!(g[g.len() / 2], 0.5);
        for i in 0..g.len() {
            assert!((g[i] + g[g.len() - 1 - i] - 1.0).abs() < 1e-15);
        }
    }
}
