use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by registration, I/O and evaluation routines.
///
/// Every fallible operation in the crate returns [`Result`]; none panic on
/// malformed input.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header in {path}: {reason}")]
    Header { path: PathBuf, reason: String },

    #[error("dimension mismatch: {context} ({left:?} vs {right:?})")]
    DimensionMismatch {
        context: &'static str,
        left: [usize; 3],
        right: [usize; 3],
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate pair: constant input leaves the measure undefined")]
    DegeneratePair,

    #[error("degenerate scale probe: the probe state does not separate the measures")]
    DegenerateScaleProbe,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn header(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Header {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn invalid(reason: impl Into<String>) -> Self {
        Error::InvalidArgument(reason.into())
    }
}
