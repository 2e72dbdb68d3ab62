use thiserror::Error;

/// Error type shared across the crate. Variants map onto process exit
/// codes in the CLI: config/dimension -> 2, data/io -> 3, numeric -> 4.
#[derive(Debug, Error)]
pub enum CpError {
    #[error("config error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dim(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CpError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CpError::Config(_) | CpError::Dim(_) => 2,
            CpError::Data(_) | CpError::Io { .. } => 3,
            CpError::Numeric(_) => 4,
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CpError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CpError>;
