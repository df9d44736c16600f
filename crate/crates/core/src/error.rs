use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{func}: argument outside domain ({msg})")]
    Domain { func: &'static str, msg: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("cluster index {index} out of range (K = {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("degenerate posterior: {0}")]
    Degenerate(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(func: &'static str, msg: impl Into<String>) -> Error {
    Error::Domain {
        func,
        msg: msg.into(),
    }
}
