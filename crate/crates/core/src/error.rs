use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),

    #[error("incompatible horizons: {left} vs {right} waypoints (dt {left_dt} vs {right_dt})")]
    IncompatibleHorizon {
        left: usize,
        right: usize,
        left_dt: f64,
        right_dt: f64,
    },

    #[error("anchor {anchor}s is outside the {horizon}s horizon or not a multiple of dt={dt}")]
    AnchorOutOfHorizon { anchor: f64, horizon: f64, dt: f64 },

    #[error("pool of {available} scenes cannot supply {requested} (train + held)")]
    InsufficientPool { available: usize, requested: usize },

    #[error("line {line}{}: {message}", record.as_ref().map(|r| format!(" (record {r})")).unwrap_or_default())]
    Parse {
        line: usize,
        record: Option<String>,
        message: String,
    },

    #[error("validation failed for {record}: {message}")]
    Validation { record: String, message: String },

    #[error("{0}")]
    EmptyInput(&'static str),

    #[error("advantage normalization needs at least 2 rewards, got {0}")]
    GroupTooSmall(usize),

    #[error("every sample in the batch produced a non-finite policy ratio ({0} skipped)")]
    AllSamplesSkipped(usize),

    #[error("non-finite loss for {0} consecutive batches")]
    NonFiniteLoss(usize),

    #[error("sampled path carries no stored states (noise-free or truncated path)")]
    MissingStates,

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("architecture digest mismatch: checkpoint {found:016x}, expected {expected:016x} ({detail})")]
    DigestMismatch {
        found: u64,
        expected: u64,
        detail: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user input (bad files, flags, configs)
    /// rather than by an internal failure.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Validation { .. }
                | Error::Config(_)
                | Error::DigestMismatch { .. }
                | Error::Checkpoint { .. }
                | Error::InsufficientPool { .. }
                | Error::Io { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
