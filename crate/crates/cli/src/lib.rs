//! Scenario files, snapshots and the run driver behind the `jungle` binary.

pub mod run;
pub mod scenario;
pub mod simulation;
pub mod snapshot;

use jungle::coupler::CouplerError;
use jungle::units::UnitError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("snapshot line {line}: {msg}")]
    Snapshot { line: usize, msg: String },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Coupler(#[from] CouplerError),
    #[error("worker `{worker}` on resource `{resource}`: {source}")]
    Worker {
        worker: String,
        resource: String,
        #[source]
        source: CouplerError,
    },
    #[error(transparent)]
    Units(#[from] UnitError),
}

impl CliError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }

    /// 2 for bad input, 3 when a worker died, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Snapshot { .. } | CliError::Units(_) => 2,
            CliError::Coupler(CouplerError::Config(_)) => 2,
            CliError::Worker {
                source: CouplerError::WorkerDied(_),
                ..
            }
            | CliError::Coupler(CouplerError::WorkerDied(_)) => 3,
            _ => 1,
        }
    }
}
