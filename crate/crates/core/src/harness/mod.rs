//! Training, evaluation, gradient checks, ablations and the reference oracles.

pub mod ablation;
pub mod config;
pub mod gradcheck;
pub mod optim;
pub mod oracles;
pub mod train;

pub use ablation::{ablation_csv, run_ablation, AblationConfig, AblationRow, AblationSpec, AblationVariant};
pub use config::RunConfig;
pub use gradcheck::{grad_check_suite, GradCheckReport, TensorCheck};
pub use optim::{adam_step, lr_at, AdamState, Schedule, TrainConfig};
pub use train::{evaluate, train, train_fresh, RunReport, TrainOutcome};
