use alloc::string::String;
use core::fmt;

/// Errors surfaced by the core library.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Tensor or parameter dimensions do not line up.
    ShapeMismatch(String),
    /// A ciphertext operation mixed keys or decryption used the wrong key.
    KeyMismatch(String),
    /// A vector expected to carry direction information has (near-)zero norm.
    DegenerateVector(String),
    /// A value fell outside the domain an operation is defined on.
    Range(String),
    /// Gradient requested without a recorded forward trace.
    NoTrace,
    /// The secure aggregation round cannot continue (e.g. no survivors).
    ProtocolAbort(String),
    /// A protocol message contract was violated.
    Protocol(String),
    /// Invalid experiment configuration.
    Config(String),
    /// Attack is undefined for the given inputs.
    AttackUndefined(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch(m) => write!(f, "shape mismatch: {m}"),
            Error::KeyMismatch(m) => write!(f, "key mismatch: {m}"),
            Error::DegenerateVector(m) => write!(f, "degenerate vector: {m}"),
            Error::Range(m) => write!(f, "out of range: {m}"),
            Error::NoTrace => write!(f, "no recorded forward trace"),
            Error::ProtocolAbort(m) => write!(f, "protocol aborted: {m}"),
            Error::Protocol(m) => write!(f, "protocol error: {m}"),
            Error::Config(m) => write!(f, "invalid config: {m}"),
            Error::AttackUndefined(m) => write!(f, "attack undefined: {m}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
