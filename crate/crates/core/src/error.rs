use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("joint {joint} = {value} rad outside limit [{lo}, {hi}]")]
    JointLimit {
        joint: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("invalid arm model: {0}")]
    ArmModel(String),

    #[error("point is behind the camera (camera-frame z = {z})")]
    NotVisible { z: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("artifact mismatch: {0}")]
    ArtifactMismatch(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("schema error in {path}: {message}")]
    Schema { path: PathBuf, message: String },

    #[error("kernel graph is disconnected: {0}")]
    Disconnected(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("training diverged at epoch {epoch}: loss {loss} exceeds 10x initial loss {initial}")]
    TrainingDiverged { epoch: usize, loss: f64, initial: f64 },

    #[error("degenerate covariance: {0}")]
    DegenerateCovariance(String),

    #[error("graph build failed: {0}")]
    GraphBuild(String),

    #[error("no path from {src} to {dst} ({blocked} node(s) blocked)")]
    NoPath {
        src: usize,
        dst: usize,
        blocked: usize,
    },

    #[error("empty index")]
    EmptyIndex,

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse failure classes surfaced to process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Numerical,
    Other,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_)
            | Error::ArtifactMismatch(_)
            | Error::Parse { .. }
            | Error::Schema { .. }
            | Error::ArmModel(_)
            | Error::Json(_)
            | Error::Io { .. } => ErrorClass::Config,
            Error::Numerical(_)
            | Error::Disconnected(_)
            | Error::TrainingDiverged { .. }
            | Error::DegenerateCovariance(_) => ErrorClass::Numerical,
            _ => ErrorClass::Other,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
