//! Crate-wide error type.

/// Errors surfaced by tensor ops, the audio front end, dataset handling and
/// the training harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two tensor shapes that an op cannot combine.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),
    /// Malformed or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),
    /// A value outside the numeric domain an op accepts (NaN, non-positive step, ...).
    #[error("numeric domain error: {0}")]
    Numeric(String),
    /// Malformed file contents; `offset` is the byte position where parsing failed.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    /// API misuse (non-scalar loss, empty split, ...).
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
