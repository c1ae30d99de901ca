use thiserror::Error;

/// Error type shared by all modules of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("index range [{start}, {end}) invalid for length {len}")]
    Range {
        start: usize,
        end: usize,
        len: usize,
    },

    #[error("divergent quantity: {0}")]
    Divergent(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("nonpositive value where a positive one is required: {0}")]
    Nonpositive(String),

    #[error("trajectory aborted at step {step}: {reason}")]
    TrajectoryAbort { step: usize, reason: String },

    #[error("aborted trajectory fraction {fraction} exceeds threshold {threshold}")]
    AbortThreshold { fraction: f64, threshold: f64 },

    #[error("unknown tag: {0}")]
    UnknownTag(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_)
            | Error::Dimension(_)
            | Error::Range { .. }
            | Error::Divergent(_)
            | Error::InsufficientData(_)
            | Error::Nonpositive(_)
            | Error::UnknownTag(_) => 2,
            Error::TrajectoryAbort { .. } | Error::AbortThreshold { .. } => 3,
            Error::Io { .. } => 4,
        }
    }
}
