use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("sequence of {len} tokens exceeds max_seq_len {max}{}", context_note(.k))]
    Length {
        len: usize,
        max: usize,
        /// Number of demonstrations packed into the context, when the
        /// overflow came from a demonstration context.
        k: Option<usize>,
    },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("non-finite training loss at step {step}: {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("unknown token {0:?} and vocabulary has no <unk> entry")]
    UnknownToken(String),

    #[error("schema error at line {line}: {msg}")]
    Schema { line: usize, msg: String },

    #[error("unknown label {label:?} at line {line}")]
    UnknownLabel { line: usize, label: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn context_note(k: &Option<usize>) -> String {
    match k {
        Some(k) => format!(" (demonstration context with K={k})"),
        None => String::new(),
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
