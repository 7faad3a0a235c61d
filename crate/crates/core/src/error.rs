use thiserror::Error;

/// Errors produced by the tensor substrate, the reference path and the tiled kernels.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("invalid range: lo ({lo}) must be < hi ({hi})")]
    InvalidRange { lo: f64, hi: f64 },

    #[error("shape mismatch in {op}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("window partition: window side {k} does not divide image {height}x{width}")]
    Partition {
        height: usize,
        width: usize,
        k: usize,
    },

    #[error("non-finite value at flat index {index} in {op}")]
    NonFinite { op: &'static str, index: usize },

    #[error("finite-difference oracle: {0}")]
    Oracle(String),

    #[error("invalid tile config: {0}")]
    InvalidConfig(String),

    #[error(
        "scratchpad capacity exceeded: {required} bytes required, {available} bytes available"
    )]
    Capacity { required: usize, available: usize },

    #[error("kernel context: {0}")]
    Context(String),

    #[error("slice (batch {batch}, head {head}): {source}")]
    Slice {
        batch: usize,
        head: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("unknown kernel `{0}`")]
    UnknownKernel(String),
}

impl Error {
    /// Strips any `(batch, head)` annotation and returns the underlying error.
    pub fn root(&self) -> &Error {
        match self {
            Error::Slice { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn is_capacity(&self) -> bool {
        matches!(self.root(), Error::Capacity { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
