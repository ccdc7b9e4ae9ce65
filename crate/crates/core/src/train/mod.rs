//! Optimisation, synthetic tasks and the seeded experiment runners.

pub mod ablation;
pub mod optim;
pub mod task;
pub mod trainer;

pub use ablation::{run_ablation, run_ablation_with, AblationRow, AblationTable, RunOutcome, Variant};
pub use optim::{clip_global_norm, AdamState, LrSchedule};
pub use task::{Example, LocalRule, Split, SyntheticTask, TaskKind};
pub use trainer::{evaluate, init_model, train, train_with, EvalMetrics, StepLog, TrainConfig, TrainingReport};
