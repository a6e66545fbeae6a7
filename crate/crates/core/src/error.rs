//! Error type shared by every module of the crate.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T, E = FouraError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FouraError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid rank {rank}: must satisfy {constraint}")]
    InvalidRank { rank: usize, constraint: String },

    #[error("shape mismatch: {0}")]
    ShapeError(String),

    #[error("invalid gate state: {0}")]
    InvalidGateState(String),

    #[error("gradient check requires a differentiable gate (mode {0})")]
    NonDifferentiable(String),

    #[error("training diverged at step {step}: {reason}")]
    TrainingDiverged { step: usize, reason: String },

    #[error("generalization bound is degenerate: lambda_min + 2(1 - p) = {denominator}")]
    DegenerateBound { denominator: f64 },

    #[error("projection of base weights onto adapter subspace vanishes (norm {0:e})")]
    DegenerateProjection(f64),

    #[error("reference adapter has no singular subspace (zero matrix)")]
    DegenerateSubspace,

    #[error("incompatible adapters: {0}")]
    IncompatibleAdapters(String),

    #[error("incompatible checkpoints: {0}")]
    IncompatibleCheckpoints(String),

    #[error("config error at line {line}, field `{field}`: {message}")]
    ConfigError {
        line: usize,
        field: String,
        message: String,
    },

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    UnsupportedVersion { found: u16, expected: u16 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl FouraError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Self::ShapeError(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Self::InvalidInput(msg.into())
    }

    pub(crate) fn config(line: usize, field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::ConfigError {
            line,
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for failures caused by numerics rather than by bad usage.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Self::TrainingDiverged { .. }
                | Self::DegenerateBound { .. }
                | Self::DegenerateProjection(_)
                | Self::DegenerateSubspace
                | Self::NonDifferentiable(_)
        )
    }
}
