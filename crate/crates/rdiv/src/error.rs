use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate alpha grid: {0}")]
    DegenerateGrid(String),
    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },
    #[error("unsupported dimension: {0}")]
    UnsupportedDimension(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("unknown config key: {0}")]
    UnknownKey(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    /// Stable machine-readable category, used by the CLI on failure.
    pub fn category(&self) -> &'static str {
        match self {
            Error::DimensionMismatch(_) => "dimension-mismatch",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::DegenerateGrid(_) => "degenerate-grid",
            Error::TrainingDiverged { .. } => "training-diverged",
            Error::UnsupportedDimension(_) => "unsupported-dimension",
            Error::InvalidParameter(_) => "invalid-parameter",
            Error::Config(_) => "config",
            Error::UnknownKey(_) => "unknown-key",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Serde(_) => "serde",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
