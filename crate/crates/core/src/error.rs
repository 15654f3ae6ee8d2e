use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{what} id {id} out of range (count {count})")]
    OutOfRange {
        what: &'static str,
        id: usize,
        count: usize,
    },

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("template {template} takes {anchors} anchor(s) and {relations} relation(s), got {got_anchors} and {got_relations}")]
    Arity {
        template: &'static str,
        anchors: usize,
        relations: usize,
        got_anchors: usize,
        got_relations: usize,
    },

    #[error("unsupported query structure: {0}")]
    UnsupportedStructure(String),

    #[error("invalid query graph: {0}")]
    InvalidGraph(String),

    #[error("malformed nested query form at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: String },

    #[error("sampling failed: {0}")]
    SamplingFailure(String),

    #[error("brute-force oracle refuses {0} variables (max 4)")]
    TooManyVariables(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
