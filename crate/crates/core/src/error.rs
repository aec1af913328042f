use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("sequence length {len} exceeds capacity {max_seq}")]
    Capacity { len: usize, max_seq: usize },

    #[error("unknown token id {0}")]
    Vocabulary(u32),

    #[error("fusion shape error: {0}")]
    FusionShape(String),

    #[error("feature format error (camera {camera:?}): {message}")]
    FeatureFormat {
        camera: Option<usize>,
        message: String,
    },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("{name} = {value} outside [{lo}, {hi}]")]
    Range {
        name: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("judge failed on pair {index}: {message}")]
    Judge { index: usize, message: String },

    #[error("could not parse judge reply: {0:?}")]
    JudgeReply(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dangling reference {path:?} at line {line}")]
    Reference { line: usize, path: PathBuf },

    #[error("training diverged: non-finite gradient in {0}")]
    Divergence(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unknown parameter {0}")]
    UnknownParameter(String),

    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn features(camera: Option<usize>, message: impl Into<String>) -> Self {
        Error::FeatureFormat {
            camera,
            message: message.into(),
        }
    }
}
