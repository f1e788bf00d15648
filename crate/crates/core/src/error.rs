use std::path::PathBuf;

/// Error type shared across the crate.
///
/// Tensor-algebra shape violations are programming errors and panic with a
/// message naming both shapes; everything driven by external data (files,
/// labels, checkpoints, configs) surfaces as a variant here.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("unsupported character {ch:?} (charset is a-z, 0-9)")]
    Charset { ch: char },

    #[error("bad label {label:?}: {reason}")]
    Label { label: String, reason: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("numeric check failed: {0}")]
    Numeric(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
