use std::path::PathBuf;

use crate::tensor::Dims;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("timestep {t} out of range (schedule has {n_train} training steps)")]
    TimestepOutOfRange { t: usize, n_train: usize },

    #[error("degenerate timestep {t}: alpha_bar = {alpha_bar}")]
    DegenerateTimestep { t: usize, alpha_bar: f64 },

    #[error("singular EDM step between sigma {sigma_from} and {sigma_to}")]
    SingularStep { sigma_from: f64, sigma_to: f64 },

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("scoring error: {0}")]
    Scoring(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("format error in {path}: {reason}", path = .path.display())]
    Format { path: PathBuf, reason: String },

    #[error("tensor dims {0:?} overflow")]
    DimOverflow(Dims),

    #[error("i/o error on {path}: {source}", path = .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// The pipeline stage that produced this error, if it was tagged.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}

/// Tags errors with the pipeline stage they came from.
pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| match e {
            tagged @ Error::Stage { .. } => tagged,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        })
    }
}
