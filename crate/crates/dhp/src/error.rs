use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum DhpError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument for {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("unsupported topology: {0}")]
    UnsupportedTopology(String),

    #[error("search budget of {budget} epochs exceeded; FLOPs ratio stuck at {ratio:.4} (target {target:.2}); consider a larger sparsity factor")]
    BudgetExceeded {
        budget: usize,
        ratio: f64,
        target: f64,
    },

    #[error("verification suite '{suite}' failed: {detail}")]
    VerifyFailed { suite: String, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl DhpError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        DhpError::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn arg(op: &'static str, detail: impl Into<String>) -> Self {
        DhpError::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, DhpError>;
