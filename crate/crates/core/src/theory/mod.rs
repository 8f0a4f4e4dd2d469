//! Numerical checks of the factored-Hessian conditioning bounds and of the
//! momentum-reset convergence bounds.

mod convergence;
mod lemma;

pub use convergence::{
    convergence_experiment, restart_bound, sgdm_bound, ConvergenceReport, ExperimentSettings,
    FiniteSumProblem, SeedOutcome,
};
pub use lemma::{
    alpha_balance_sweep, alpha_factorization, alpha_ratios, assemble_factored_hessian,
    factor_jacobian, finite_difference_hessian, parameter_hessian, robust_condition,
    verify_lemma1_bounds, FactorSpectra, FactoredHessian, Lemma1Instance, Lemma1Report, Lemma1Row,
    QuadraticLoss,
};
