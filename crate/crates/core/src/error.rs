use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("wav parse error at byte {offset}: {message}")]
    WavParse { offset: usize, message: String },

    #[error("unsupported sample rate {rate} Hz (expected {expected} Hz)")]
    UnsupportedRate { rate: u32, expected: u32 },

    #[error("chord parse error in {token:?} at column {column}: {message}")]
    ChordParse {
        token: String,
        column: usize,
        message: String,
    },

    #[error("lab parse error on line {line}: {message}")]
    LabParse { line: usize, message: String },

    #[error("overlapping intervals on lines {first}-{second}")]
    LabOverlap { first: usize, second: usize },

    #[error("zero variance in normalization pool")]
    ZeroVariance,

    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
