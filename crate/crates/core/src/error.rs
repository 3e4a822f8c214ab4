use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or extents do not satisfy an operation's contract.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// NaN or infinity produced or consumed by an operation.
    #[error("non-finite value in {op}")]
    NonFinite { op: &'static str },

    /// API misuse, e.g. backward twice or a missing gradient.
    #[error("usage error: {0}")]
    Usage(String),

    /// Invalid model or optimizer configuration.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Attention map requested where it is not defined.
    #[error("map undefined: {0}")]
    MapUndefined(String),

    /// Malformed checkpoint or model file.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Dimension {
        op,
        detail: detail.into(),
    }
}
