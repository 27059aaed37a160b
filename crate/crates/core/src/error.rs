use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = KsttError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum KsttError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl KsttError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        KsttError::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        KsttError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the input data rather than by how the
    /// program was invoked.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            KsttError::Ingestion(_)
                | KsttError::Io { .. }
                | KsttError::Checkpoint(_)
                | KsttError::Lookup(_)
                | KsttError::Sampling(_)
        )
    }
}
