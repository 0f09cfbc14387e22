use crate::transport::Role;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("validation failed: {0}")]
    Validation(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("duplicate role {0:?}")]
    DuplicateRole(Role),

    #[error("protocol version mismatch: ours {ours}, theirs {theirs}")]
    VersionMismatch { ours: u16, theirs: u16 },

    #[error("channel to {0:?} is closed")]
    ChannelClosed(Role),

    #[error("handshake timed out")]
    Timeout,

    #[error("message decode failed: {0}")]
    Decode(String),

    #[error("single-use state reused: {0}")]
    StateReuse(&'static str),

    #[error("offline material exhausted: {0}")]
    MaterialExhausted(&'static str),

    #[error("homomorphic encryption: {0}")]
    He(String),

    #[error("insecure HE parameters: {0}")]
    InsecureParams(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}
