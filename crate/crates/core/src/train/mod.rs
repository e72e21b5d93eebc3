//! Episodic training, paired evaluation with confidence intervals, and
//! multi-seed sweeps.

mod eval;
mod optimizer;
mod sweep;
mod trainer;

pub use eval::{eval_episodes, evaluate, mean_ci, paired_delta, EvalConfig, EvalReport, Z95};
pub use optimizer::{Optimizer, OptimizerConfig, OptimizerKind};
pub use sweep::{aggregate, flag_outliers, seed_sweep, SeedResult, SweepReport};
pub use trainer::{
    episodes_accuracy, fixed_training_episodes, train, LogEntry, TrainConfig, TrainLog, TrainOutcome,
};
