use thiserror::Error;

#[derive(Debug, Error)]
pub enum GphError {
    #[error("index error: {0}")]
    Index(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("capacity error: need {needed} bytes, budget {budget} bytes")]
    Capacity { needed: u128, budget: u128 },
    #[error("state error: {0}")]
    State(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("stability error: {0}")]
    Stability(String),
    #[error("precondition error: {0}")]
    Precondition(String),
    #[error("calibration error: {0}")]
    Calibration(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("no convergence after {} iterations", factors.len())]
    NonConvergence {
        factors: Vec<f64>,
        distances: Vec<f64>,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GphError>;

pub(crate) fn arg<T>(msg: impl Into<String>) -> Result<T> {
    Err(GphError::Argument(msg.into()))
}

pub(crate) fn shape<T>(msg: impl Into<String>) -> Result<T> {
    Err(GphError::Shape(msg.into()))
}
