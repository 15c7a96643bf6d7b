use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward already ran on this tape; reset it before running again")]
    BackwardTwice,

    #[error("backward needs a taped graph")]
    NotTaped,

    #[error("loss must be a single scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("CTC target of length {target_len} needs at least {required} steps, got {input_len}")]
    Infeasible {
        input_len: usize,
        target_len: usize,
        required: usize,
    },

    #[error("brute-force CTC would enumerate {0} paths (limit 10^7)")]
    TooLarge(u128),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("reference sequence is empty")]
    EmptyReference,

    #[error("could not separate prototypes for K={k} in D={dim} after {attempts} attempts; try a larger feature dimension")]
    PrototypeSeparation {
        k: usize,
        dim: usize,
        attempts: usize,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("{what} format version {found} is not supported (expected {expected})")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("non-finite loss on utterance {utterance}: {detail}")]
    NonFiniteLoss { utterance: String, detail: String },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
