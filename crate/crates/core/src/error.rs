use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box ({x1}, {y1}, {x2}, {y2}): width and height must be positive and finite")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate RoI: {0}")]
    DegenerateRoi(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at step {step}: loss {loss} stayed above the divergence bound (initial loss {initial})")]
    Diverged { step: usize, loss: f64, initial: f64 },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
