use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KernelError {
    /// Two interacting points share a position while softening is zero.
    #[error("coincident particles at zero softening (source {source_index}, target {target_index})")]
    CoincidentParticles {
        source_index: usize,
        target_index: usize,
    },
    #[error("stellar evolution table missing")]
    TableMissing,
    #[error("malformed evolution table: {0}")]
    Table(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("duplicate particle id {0}")]
    DuplicateId(u64),
    #[error("unknown particle id {0}")]
    UnknownId(u64),
    #[error("column length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
}
