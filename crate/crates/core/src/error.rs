use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("checkpoint record `{record}`: {reason}")]
    Checkpoint { record: String, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("non-finite loss at epoch {epoch}, batch {batch} (per-stage distances {distances:?})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        /// Per used stage, the pair distances of the offending batch.
        distances: Vec<(usize, Vec<f64>)>,
    },

    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors that originate in the input data rather than in training.
    pub fn is_data_error(&self) -> bool {
        match self {
            Error::Data(_) | Error::Io { .. } | Error::Checkpoint { .. } | Error::Json(_) => true,
            Error::Fold { source, .. } => source.is_data_error(),
            _ => false,
        }
    }
}
