use std::path::PathBuf;

use thiserror::Error;

use crate::numgrad::ParamVector;
use crate::rollout::TaskId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("architecture mismatch between parameter vectors")]
    ArchMismatch,

    #[error("time {0} outside the open interval (0, 1)")]
    TimeOutOfRange(f64),

    #[error("non-positive variance {0}")]
    NonPositiveVariance(f64),

    #[error("covariance matrix is not symmetric positive definite")]
    NotPositiveDefinite,

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("condition task {got:?} does not match reward task {expected:?}")]
    WrongTask { expected: TaskId, got: TaskId },

    #[error("no expert routed for task {0:?}")]
    Unrouted(TaskId),

    #[error("group rewards have not been set")]
    RewardsUnset,

    #[error("group was sampled from a different policy (hash {sampled:#018x}, current {current:#018x})")]
    OffPolicy { sampled: u64, current: u64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at iteration {iteration}: {reason}")]
    Diverged {
        iteration: usize,
        reason: String,
        /// Parameters before the failing update, when available.
        last_good: Option<Box<ParamVector>>,
    },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {cause}")]
    Io { path: PathBuf, cause: std::io::Error },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn diverged(iteration: usize, reason: impl Into<String>, last_good: Option<&ParamVector>) -> Self {
        Error::Diverged {
            iteration,
            reason: reason.into(),
            last_good: last_good.map(|p| Box::new(p.clone())),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            cause: source,
        }
    }
}
