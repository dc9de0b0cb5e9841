use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record at line {line}: field `{field}`: {message}")]
    Malformed {
        line: usize,
        field: String,
        message: String,
    },

    #[error("vocabulary overflow: closed vocabulary of {limit} entries exceeded by token {token:?}")]
    VocabOverflow { limit: usize, token: String },

    #[error("token {0:?} is not in the frozen vocabulary")]
    UnknownToken(String),

    #[error("transcript {meeting_id} has {sentences} sentence(s); at least 2 are required")]
    TooFewSentences { meeting_id: String, sentences: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("pair {pair_index}: sequence of length {len} exceeds max_positions {max}")]
    Overlong {
        pair_index: usize,
        len: usize,
        max: usize,
    },

    #[error("indicator {indicator} requires {missing}")]
    IndicatorMismatch {
        indicator: String,
        missing: &'static str,
    },

    #[error(
        "bucket budget {budget} cannot cover {segments} anchor segments (needs {required}); lower the anchor ratio"
    )]
    InfeasibleBudget {
        budget: usize,
        segments: usize,
        required: usize,
    },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("no retained forward pass: {0}")]
    NoForwardPass(&'static str),

    #[error("missing artifact {}: run `{command}` first", path.display())]
    MissingArtifact { path: PathBuf, command: &'static str },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
