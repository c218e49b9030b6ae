//! Orchestration behind the command-line tool: configuration, checkpoints,
//! fixtures, training and evaluation commands.

mod checkpoint;
mod commands;
mod config;
pub mod gradcheck;
mod table;

pub use checkpoint::{Checkpoint, CheckpointHeader, ModelKind, TensorMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use commands::{
    build_ctc, build_prompt_system, cmd_ablate, cmd_eval, cmd_finetune, cmd_fixtures, cmd_gradcheck, cmd_train, fixtures_ready,
    load_system, CompetenceReport, EvalLine, EvalSummary, Fixtures, LoadedSystem, Progress, TrainReport,
};
pub use config::{ExperimentConfig, SystemKind};
pub use table::{Table, TableRow};
