//! Orchestration: run configuration, the training loop, evaluation,
//! decomposition dumps, robustness sweeps, the classical baseline, ablation
//! grids, checkpoint I/O, and CSV emission. The CLI binary is a thin wrapper
//! over these functions.

pub mod ablation;
pub mod baseline;
pub mod checkpoint;
pub mod config;
pub mod decompose;
pub mod eval;
pub mod gradcheck;
pub mod sweep;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{DataSource, Mode, OptimizerConfig, RpcaOverrides, RunConfig, SynthSpec};
pub use eval::{evaluate_samples, evaluation_csv, forward_scores, ImageEval};
pub use sweep::{robustness_sweep, sweep_csv, GAUSSIAN_LEVELS, PEPPER_PROB, SALT_LEVELS};
pub use train::{load_run_data, train, EpochRow, LipschitzRow, TrainedArtifacts};
