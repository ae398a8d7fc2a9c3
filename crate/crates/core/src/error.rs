use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes; names the offending operation and both shapes.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A caller violated an API precondition.
    #[error("{0}")]
    Contract(String),

    /// A non-finite value surfaced where a finite one is required.
    #[error("non-finite value in {tensor}: {detail}")]
    Numeric { tensor: String, detail: String },

    /// A data file failed to parse; carries the location.
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// A checkpoint failed to load or validate.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn numeric(tensor: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            tensor: tensor.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
