use thiserror::Error;

/// Errors raised anywhere in the forecasting pipeline.
///
/// The variants are coarse on purpose: the command-line front end maps them
/// onto a small set of stable exit codes (see [`StsError::exit_code`]).
#[derive(Debug, Error)]
pub enum StsError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl StsError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        StsError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 data, 2 config, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            StsError::Data(_) | StsError::Io { .. } => 1,
            StsError::Config(_) | StsError::Argument(_) | StsError::Contract(_) => 2,
            StsError::Dimension(_) => 2,
            StsError::Domain(_) | StsError::Numeric(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, StsError>;
