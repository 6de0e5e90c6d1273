use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op} (node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("{0}")]
    NonFiniteInput(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("variable does not belong to this tape")]
    ForeignVar,

    #[error("checkpoint replay diverged from the recorded forward pass")]
    ReplayMismatch,

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("adapter sets are incompatible: {0}")]
    AdapterMismatch(String),
}

impl Error {
    /// True for failures of the numerics (non-finite values, replay
    /// divergence) as opposed to bad inputs or configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::NonFiniteInput(_) | Error::ReplayMismatch
        )
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
