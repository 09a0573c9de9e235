use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Matrix shapes do not line up for the requested operation.
    #[error("dimension mismatch in {op}: left is {lhs_rows}x{lhs_cols}, right is {rhs_rows}x{rhs_cols}")]
    Dimension {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },

    /// A configuration value is invalid or internally inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// Bad runtime input (token out of vocabulary, label out of range, ...).
    #[error("input error: {0}")]
    Input(String),

    /// A caller broke an API contract (non-scalar loss, mismatched layouts, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A public operation produced a NaN or infinity.
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// True when the error stems from configuration rather than runtime state.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
