//! Experiment harness: configuration files, the staged teach / score /
//! distill pipeline, variant comparison and ablation sweeps.

pub mod ablation;
pub mod config;
pub mod pipeline;

pub use ablation::{cmd_ablate, AblationSpec};
pub use config::{Experiment, ExperimentConfig};
pub use pipeline::{cmd_compare, cmd_distill, cmd_eval, cmd_score, cmd_teach};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const VALIDATION: i32 = 3;
    pub const NUMERICAL: i32 = 4;
    /// A sweep in which every run failed.
    pub const FAILED: i32 = 1;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, unreadable or invalid configuration.
    #[error("{0}")]
    Usage(String),
    /// Inputs that do not agree with each other (stale scores, wrong dims).
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Failed(String),
    #[error(transparent)]
    Core(#[from] lrds_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use lrds_core::Error as E;
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Validation(_) => exit::VALIDATION,
            CliError::Failed(_) => exit::FAILED,
            CliError::Core(e) => match e {
                E::Validation(_) | E::Format(_) | E::Parse { .. } => exit::VALIDATION,
                E::Numerical(_) | E::Convergence { .. } => exit::NUMERICAL,
                _ => exit::USAGE,
            },
        }
    }
}
