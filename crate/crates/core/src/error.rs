use std::io;

use crate::decoding::GenerationTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller-supplied value violates an operation's precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("context of {len} tokens exceeds the model capacity of {max}")]
    Capacity { len: usize, max: usize },

    /// The remote backend could not be reached or answered with something
    /// that is not a valid protocol message. `raw` keeps the offending line.
    #[error("transport error: {message}")]
    Transport { message: String, raw: Option<String> },

    /// The remote backend answered with a well-formed error response.
    #[error("remote error [{code}]: {message}")]
    Remote { code: String, message: String },

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    /// Failure of the execution environment (sandbox setup, process spawn),
    /// as opposed to a failing test.
    #[error("environment error: {0}")]
    Environment(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    /// A decode aborted part-way; the steps completed so far are attached.
    #[error("decode aborted after {} steps: {source}", partial.steps.len())]
    Aborted {
        #[source]
        source: Box<Error>,
        partial: Box<GenerationTrace>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn transport(msg: impl Into<String>, raw: Option<String>) -> Self {
        Error::Transport {
            message: msg.into(),
            raw,
        }
    }
}
