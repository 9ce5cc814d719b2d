use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("degenerate noise schedule: largest pairwise distance {sigma_max} does not exceed {sigma_min}")]
    DegenerateSchedule { sigma_max: f64, sigma_min: f64 },
    #[error("training diverged at step {step}")]
    TrainingDiverged { step: usize },
    #[error("augmentation diverged at step {step}")]
    AugmentationDiverged { step: usize },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn schema(msg: impl Into<String>) -> Self {
        Error::Schema(msg.into())
    }

    pub(crate) fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Runtime failures (divergence) as opposed to bad input.
    pub fn is_runtime(&self) -> bool {
        matches!(
            self,
            Error::TrainingDiverged { .. } | Error::AugmentationDiverged { .. }
        )
    }
}

pub(crate) fn check_dim(expected: usize, got: usize, what: &str) -> Result<()> {
    if expected != got {
        return Err(Error::schema(format!(
            "{what}: expected dimension {expected}, got {got}"
        )));
    }
    Ok(())
}
