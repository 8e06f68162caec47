use thiserror::Error;

/// Crate-wide error type.
///
/// Variants map onto the CLI exit-code contract: `Config` -> 2,
/// `Data` -> 3, `Numeric` -> 4, everything else -> 1.
#[derive(Debug, Error)]
pub enum GsaError {
    /// Shape or axis mismatch between tensors. Names the offending axis.
    #[error("dimension mismatch on {axis}: expected {expected}, got {got}")]
    Dimension {
        axis: &'static str,
        expected: usize,
        got: usize,
    },

    /// An argument is outside its valid range.
    #[error("invalid argument {name}: {reason}")]
    Argument { name: &'static str, reason: String },

    /// A configuration is internally inconsistent or refers to missing pieces.
    #[error("configuration error: {0}")]
    Config(String),

    /// A dataset sample or file violates the data contract.
    #[error("data error: {0}")]
    Data(String),

    /// A model/plan structural mismatch during surgery.
    #[error("structural error: {0}")]
    Structural(String),

    /// Non-finite values where finite ones are required (NaN loss etc.).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Checkpoint or dataset container violates its binary format.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl GsaError {
    pub fn argument(name: &'static str, reason: impl Into<String>) -> Self {
        GsaError::Argument {
            name,
            reason: reason.into(),
        }
    }

    /// Exit code for the CLI contract (0 success, 2 config, 3 data, 4 numeric).
    pub fn exit_code(&self) -> i32 {
        match self {
            GsaError::Config(_) | GsaError::Argument { .. } => 2,
            GsaError::Data(_) => 3,
            GsaError::Numeric(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, GsaError>;
