use std::path::Path;

/// Errors raised anywhere in the segmentation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("format error in {file} at offset {offset}: {msg}")]
    Format {
        file: String,
        offset: u64,
        msg: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("synthetic generation failed: {0}")]
    Generation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(file: impl AsRef<Path>, offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            file: file.as_ref().display().to_string(),
            offset,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for errors caused by bad data or files rather than bad usage.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Format { .. } | Error::Validation(_) | Error::Io { .. } | Error::Numeric(_)
        )
    }
}
