use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("shape {shape:?} does not describe {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("{op}: matrix is not symmetric (max |s_ij - s_ji| = {max_dev:e})")]
    Asymmetric { op: &'static str, max_dev: f64 },

    #[error("isolated node {node}: degree {degree:e} is not strictly positive")]
    IsolatedNode { node: usize, degree: f64 },

    #[error(
        "affinity must be non-negative and symmetric for a real spectrum: \
         entry ({row}, {col}) = {value:e}"
    )]
    NegativeAffinity { row: usize, col: usize, value: f64 },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("Jacobi eigensolver did not converge after {sweeps} sweeps (off-diagonal norm {off:e})")]
    NoConvergence { sweeps: usize, off: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
