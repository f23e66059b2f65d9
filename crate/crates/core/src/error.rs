use thiserror::Error;

/// Errors produced anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("time {t} outside the diffusion horizon [0, {t_max}]")]
    TimeOutOfRange { t: f64, t_max: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("matrix is not positive semi-definite (smallest eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl LabError {
    /// Short machine-readable tag used in the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            LabError::TimeOutOfRange { .. } => "domain",
            LabError::InvalidParameter(_) => "invalid-parameter",
            LabError::DimensionMismatch { .. } => "dimension-mismatch",
            LabError::TooFewSamples { .. } => "too-few-samples",
            LabError::NonFinite(_) => "non-finite",
            LabError::NotPsd(_) => "not-psd",
            LabError::Singular(_) => "singular",
            LabError::Empty(_) => "empty",
            LabError::Config(_) => "config",
            LabError::Format(_) => "format",
            LabError::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
