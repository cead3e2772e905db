//! Crate-wide error type and process exit-code mapping.

/// Errors surfaced by every subsystem. The CLI maps each variant to a
/// distinct exit code (`Error::exit_code`).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad configuration: unknown key, unparsable value, invalid combination.
    #[error("config error: {0}")]
    Config(String),

    /// Bad input data: missing files, malformed formats, incompatible checkpoints.
    #[error("data error: {0}")]
    Data(String),

    /// Tensor shape rejected by an operator; names both offending shapes.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Numeric failure: NaN/Inf where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    /// Process exit code: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Shape { .. } | Error::Io(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
