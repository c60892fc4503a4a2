use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A parameter is outside its valid domain (k == 0, non-positive variance, ...).
    #[error("invalid parameter: {0}")]
    Param(String),

    /// The trusted/untrusted call sequence or tensor counts are wrong.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Blinding or coding matrices are singular or rank deficient.
    #[error("key error: {0}")]
    Key(String),

    /// A tensor could not be normalized (all-zero input).
    #[error("normalization error: {0}")]
    Normalization(String),

    /// Malformed tensor file, manifest or sealed page.
    #[error("format error: {0}")]
    Format(String),

    /// The redundant equation disagreed with the solved unknowns.
    #[error("integrity violation at layer {layer}: residual {residual:e}")]
    Integrity { layer: usize, residual: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }

    pub(crate) fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }
}
