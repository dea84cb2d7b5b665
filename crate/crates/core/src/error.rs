use thiserror::Error;

/// Errors raised by the estimation engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV parse error at row {row}, column {column}: {message}")]
    Parse { row: usize, column: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate cohort: {0}")]
    DegenerateCohort(String),

    #[error("no overlap between treated and control propensity ranges: {0}")]
    NoOverlap(String),

    #[error("positivity violated: {0}")]
    Positivity(String),

    #[error("missing variance component `{0}`")]
    MissingComponent(&'static str),

    #[error("IRLS diverged after {iterations} iterations (last finite loss {last_loss})")]
    Divergence { iterations: usize, last_loss: f64, last_coefficients: Vec<f64> },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("{failed} of {total} replicates failed (limit 5%)")]
    ReplicateFailures { failed: usize, total: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
