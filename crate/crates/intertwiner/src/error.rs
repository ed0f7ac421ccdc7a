use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: {detail}")]
    ShapeMismatch {
        context: &'static str,
        detail: String,
    },

    #[error("matrix is singular to working tolerance (pivot {pivot:.3e} at step {step})")]
    Singular { pivot: f64, step: usize },

    #[error("matrix too ill-conditioned to invert (condition estimate {cond:.3e})")]
    IllConditioned { cond: f64 },

    #[error("{what} did not converge after {iters} iterations")]
    NonConvergence { what: &'static str, iters: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("activation overflow: {0}")]
    Overflow(String),

    #[error("group-element constraint violated: {0}")]
    Constraint(String),

    #[error("activation kind mismatch: expected {expected}, got {got}")]
    KindMismatch { expected: String, got: String },

    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("residual-connected layers must share one group element (layers {0:?})")]
    UnequalResidualElements(Vec<usize>),

    #[error("column {0} has zero norm")]
    ZeroColumn(usize),

    #[error("degenerate features: {0}")]
    Degenerate(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("malformed file {path}: {detail}")]
    Format { path: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(context: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context,
            detail: detail.into(),
        }
    }
}
