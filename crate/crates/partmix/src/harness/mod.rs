//! Experiment orchestration: configuration, the two-phase training loop,
//! sweeps and comparisons, and the verification suites behind the
//! `gradcheck` and `oracle` commands.

pub mod commands;
pub mod config;
pub mod gradcheck;
pub mod oracle;
pub mod trainer;

pub use commands::{
    cmd_ablate, cmd_compare, cmd_eval, cmd_train, resolve_dataset, AblationRow, ComparisonRow,
    SweepParam,
};
pub use config::{ExperimentConfig, Regularizer};
pub use gradcheck::{run_gradcheck, GradcheckEntry, GradcheckReport};
pub use oracle::{run_oracle, OracleEntry, OracleReport};
pub use trainer::{
    losses_csv, lr_at_epoch, step_loss_and_grads, steps_per_epoch, train_on_split, Diagnostics,
    EpochRecord, Phase, RunRecord,
};
