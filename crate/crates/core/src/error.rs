use thiserror::Error;

/// Errors produced anywhere in the crate.
///
/// The variants map onto CLI exit codes: everything except [`Error::Usage`]
/// is a contract or validation failure (exit 1).
#[derive(Debug, Error)]
pub enum Error {
    /// Sequence shape is malformed: bracketing, span lengths, stray special tokens.
    #[error("structural error: {0}")]
    Structural(String),

    /// A caller broke an operation's preconditions (shapes, modes).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Corpus or checkpoint bytes could not be decoded.
    #[error("decode error: {0}")]
    Decode(String),

    /// Training produced a non-finite value.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("frozen parameter modified: {0}")]
    FrozenModified(String),

    /// Remote judge unreachable, timed out or replied with something unparseable.
    #[error("judge error: {0}")]
    Judge(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            _ => 1,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Decode(e.to_string())
    }
}
