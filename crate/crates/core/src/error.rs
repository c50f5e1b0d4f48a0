use thiserror::Error;

pub type Result<T> = std::result::Result<T, HedgeError>;

#[derive(Debug, Error)]
pub enum HedgeError {
    #[error("invalid configuration: `{field}` {reason}")]
    Config { field: &'static str, reason: String },

    #[error("index out of range: {what} = {index}, length {len}")]
    Bounds {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("malformed order-book snapshot at time_id {time_id}: {reason}")]
    MalformedSnapshot { time_id: u64, reason: String },

    #[error("snapshots out of order: time_id {current} follows {previous}")]
    Ordering { previous: u64, current: u64 },

    #[error("parse error at line {line}: {reason}")]
    Parse { line: u64, reason: String },

    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("gradient cache is stale: {0}")]
    CacheStale(String),

    #[error(
        "gradient cache needs {required} bytes \
         ({paths} paths x {steps} steps x {heads} heads x {params} params x 4 bytes), \
         budget is {budget} bytes; lower the minibatch size or raise the budget"
    )]
    MemoryBudget {
        required: u64,
        budget: u64,
        paths: usize,
        steps: usize,
        heads: usize,
        params: usize,
    },

    #[error("training diverged at epoch {epoch}, outer iteration {iteration}: {detail}")]
    Divergence {
        epoch: usize,
        iteration: usize,
        detail: String,
    },

    #[error("incomparable risk values: {0}")]
    Comparison(String),

    #[error("checkpoint version mismatch: {0}")]
    Version(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
