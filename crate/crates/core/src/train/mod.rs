//! Training, evaluation, checkpoints and sweeps.

mod checkpoint;
mod config;
mod model;
mod optim;
mod run;

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use config::{OptimizerKind, TrainConfig};
pub use model::{batch_gradients, shard_ranges, BatchResult, Model};
pub use optim::Optimizer;
pub use run::{
    compute_heatmaps, evaluate, evaluate_heatmaps, log_csv, sweep, train, train_with, EvalOptions, Evaluation, LogRow,
    SweepGrid, SweepResult, SweepRow, TrainOutcome, ALPHA_RANGE, EVAL_BATCH, K_MINUS_RANGE, K_PLUS_RANGE, M_RANGE,
};
