use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A scalar argument is outside its admissible range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Two tensors that must agree in shape do not.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An experiment configuration failed validation. The message names the field.
    #[error("invalid config: {0}")]
    Validation(String),

    /// A dataset file does not follow the expected format.
    #[error("format error: {0}")]
    Format(String),

    /// A metric is undefined for the given labels (e.g. single-class AUC).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// A checkpoint file is corrupt, truncated or of an unknown version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A loss term became non-finite during optimization.
    #[error("training diverged: non-finite {term} at epoch {epoch} step {step}")]
    Diverged {
        term: String,
        epoch: usize,
        step: usize,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code contract: 1 for validation/parameter/format problems,
    /// 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parameter(_) | Error::Validation(_) | Error::Format(_) | Error::Shape(_) => 1,
            _ => 2,
        }
    }
}
