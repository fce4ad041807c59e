use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("matrix is not positive definite (smallest failed pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },

    #[error("unstable system: {0}")]
    Stability(String),

    #[error("singular system: {0}")]
    Singularity(String),

    #[error("cannot draw {requested} items from {available}")]
    Cardinality { requested: usize, available: usize },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("non-finite objective at initialization (parameter `{param}`)")]
    Init { param: String },

    #[error("training aborted at iteration {iteration}: {detail}")]
    Training { iteration: usize, detail: String },

    #[error("time grid is not uniform at index {index}")]
    Grid { index: usize },

    #[error("missing or invalid value at row {row}, column `{column}`")]
    Ingestion { row: usize, column: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
