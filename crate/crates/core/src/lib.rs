//! Desk-scale laboratory for memory-efficient low-rank pre-training.
//!
//! The crate bundles the numerical pieces needed to compare full-rank,
//! low-rank, LoRA and sparse-plus-low-rank weight parameterizations against
//! subspace-projection optimizers (GaLore, Fira), together with periodic
//! weight refactorization and momentum reset, exact memory and FLOP
//! accounting, and numerical checks of the conditioning and convergence
//! results behind those techniques.

pub mod error;
pub mod estimator;
pub mod linalg;
pub mod net;
pub mod optim;
pub mod params;
pub mod restart;
pub mod theory;

pub use error::{Error, Result};
