//! Training harness for the preopt laboratory: run configuration, the
//! training loop, sweeps, ablations and the invariant suites exposed by the
//! `preopt` binary.

pub mod config;
pub mod experiments;
pub mod sweep;
pub mod train;
pub mod verify;

pub use config::{CorpusSource, TrainConfig, TrainMethod};
pub use sweep::{run_ablation, run_sweep, SweepSpec};
pub use train::{run_train, RunOutput};
