use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("sphere projection of a zero vector (row {row})")]
    ZeroNorm { row: usize },

    #[error("latent partition: dimension {dim} is not divisible by {blocks} blocks (valid block counts: {valid:?})")]
    Partition { dim: usize, blocks: usize, valid: Vec<usize> },

    #[error("{what}: non-finite value encountered{}", at.map(|i| alloc::format!(" at batch {i}")).unwrap_or_default())]
    NonFinite { what: &'static str, at: Option<usize> },

    #[error("model config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument { op, detail: detail.into() }
    }
}
