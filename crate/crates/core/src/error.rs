use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("backward seed must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("non-finite loss; first non-finite output produced by layer `{layer}`")]
    NonFinite { layer: String },

    #[error("checkpoint mismatch at parameter `{name}`: {detail}")]
    CheckpointMismatch { name: String, detail: String },

    #[error("malformed {what} at {location}: {detail}")]
    Parse {
        what: &'static str,
        location: String,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
