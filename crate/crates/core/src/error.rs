//! Error taxonomy shared by every module.
//!
//! The variants separate the failure classes callers are expected to handle
//! differently: bad configuration, incompatible tensor shapes, API misuse
//! (e.g. backward from a non-scalar), malformed serialized bytes, and scene
//! generation problems.

use alloc::string::String;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Error {
    /// A config value is out of its documented domain.
    #[error("configuration error: {0}")]
    Config(String),
    /// Tensor shapes do not satisfy an op's contract.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    /// The API was called in an unsupported way.
    #[error("usage error: {0}")]
    Usage(String),
    /// Serialized bytes do not decode.
    #[error("decode error: {0}")]
    Decode(String),
    /// A synthetic scene cannot be realized (e.g. camera inside geometry).
    #[error("scene generation error: {0}")]
    Generation(String),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
