use thiserror::Error;

/// Errors produced anywhere in the pipeline.
///
/// The CLI maps variants onto process exit codes: usage problems exit 2
/// (handled by the argument parser), data/digest mismatches exit 3 and
/// numeric failures exit 4; everything else exits 1.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid axis {axis} for rank-{rank} tensor")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("taxonomy error: {0}")]
    Taxonomy(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("digest mismatch for {what}: checkpoint has {expected}, got {actual}")]
    DigestMismatch {
        what: &'static str,
        expected: String,
        actual: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("attention budget exceeded: {0}")]
    Budget(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{0}")]
    Format(String),

    #[error("usage error: {0}")]
    Usage(String),
}

impl Error {
    /// Process exit code the CLI uses for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::DigestMismatch { .. } | Error::Data(_) => 3,
            Error::NonFinite(_) | Error::Numeric(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
