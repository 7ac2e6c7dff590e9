use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("checkpoint config digest mismatch: expected {expected}, found {found}")]
    DigestMismatch { expected: String, found: String },

    #[error("unsupported checkpoint format version {0}")]
    CheckpointVersion(u32),

    #[error("split contamination: {0}")]
    Contamination(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("decoder budget mismatch: {0}")]
    BudgetMismatch(String),

    #[error("record store is empty: {0}")]
    EmptyStore(PathBuf),

    #[error("mixed estimators in one series: {0}")]
    MixedEstimators(String),

    #[error("missing checkpoint for epoch {epoch} under {dir}")]
    MissingCheckpoint { epoch: usize, dir: PathBuf },

    #[error("plot error: {0}")]
    Plot(String),

    #[error("record store error: {0}")]
    Store(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("manifest parse error: {0}")]
    Manifest(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(field: &str, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_string(),
            message: message.into(),
        }
    }
}
