use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest {path}: row {row}: {message}")]
    ManifestRow {
        path: PathBuf,
        row: u64,
        message: String,
    },

    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("duplicate scan_id `{0}`")]
    DuplicateScanId(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("no content found")]
    NoContent,

    #[error("image decode failed: {0}")]
    Decode(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("weight/architecture mismatch: {0}")]
    WeightMismatch(String),

    #[error("corrupt weight file: {0}")]
    CorruptWeights(String),

    #[error("{0} undefined")]
    Undefined(String),

    #[error("embedding index is empty")]
    EmptyIndex,

    #[error("dimension mismatch: index has {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("perplexity {perplexity} infeasible for {n} points")]
    PerplexityInfeasible { perplexity: f64, n: usize },

    #[error("bootstrap could not draw a usable resample after {0} attempts")]
    DegenerateBootstrap(usize),

    #[error("training of `{model}` failed: {source}")]
    Training {
        model: String,
        #[source]
        source: Box<Error>,
    },

    #[error("nothing to report")]
    EmptyReport,

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
