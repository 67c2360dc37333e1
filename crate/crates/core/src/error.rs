//! Crate-wide error type and result alias.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad experiment configuration (unknown keys, out-of-range values, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Two adjacent layers disagree about the shape flowing between them.
    #[error("shape mismatch between `{from}` and `{to}`: {detail}")]
    LayerChain {
        from: String,
        to: String,
        detail: String,
    },

    /// A block, mask, or model is structurally inconsistent (missing layers,
    /// duplicate names, shape disagreements between peers).
    #[error("structural error: {0}")]
    Structure(String),

    /// A federation rule was broken, e.g. a client-private layer showed up in
    /// a shared payload.
    #[error("protocol violation: {0}")]
    Protocol(String),

    /// A numeric argument is outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A data file could not be decoded; `offset` is the byte position that
    /// made the parser give up.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    /// A dataset is unusable (empty shard, label out of range, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A stored artifact has a schema this build does not understand.
    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the CLI: configuration problems exit 2, data
    /// problems exit 3, everything else 4.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Parse { .. } | Error::Schema(_) => 3,
            _ => 4,
        }
    }

    /// Prefixes the human-readable part of the error with `context`, keeping
    /// the variant (and therefore the exit code) intact.
    pub fn with_context(self, context: &str) -> Error {
        match self {
            Error::Config(m) => Error::Config(format!("{context}: {m}")),
            Error::LayerChain { from, to, detail } => Error::LayerChain {
                from,
                to,
                detail: format!("{context}: {detail}"),
            },
            Error::Structure(m) => Error::Structure(format!("{context}: {m}")),
            Error::Protocol(m) => Error::Protocol(format!("{context}: {m}")),
            Error::Domain(m) => Error::Domain(format!("{context}: {m}")),
            Error::Parse { offset, message } => Error::Parse {
                offset,
                message: format!("{context}: {message}"),
            },
            Error::Data(m) => Error::Data(format!("{context}: {m}")),
            Error::Schema(m) => Error::Schema(format!("{context}: {m}")),
            Error::Internal(m) => Error::Internal(format!("{context}: {m}")),
            Error::Io(e) => Error::Internal(format!("{context}: {e}")),
        }
    }
}
