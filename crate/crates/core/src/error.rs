use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("{what} is not positive definite (eigenvalue {eigenvalue:e})")]
    NotPositiveDefinite { what: String, eigenvalue: f64 },

    #[error("steering vector vanishes on the retained data entries")]
    DegenerateSteering,

    #[error("inconsistent inputs: {0}")]
    InconsistentInputs(String),

    #[error("no frequency bins in band [{lower:.3}, {upper:.3}] rad/s; nearest bins: {nearest:?}")]
    NoBinsInBand {
        lower: f64,
        upper: f64,
        nearest: Vec<f64>,
    },

    #[error("solver did not converge after {iterations} iterations (KKT residual {kkt_residual:e})")]
    NonConvergence { iterations: usize, kkt_residual: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("unsupported grid: {0}")]
    UnsupportedGrid(String),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("at focus point {index}: {source}")]
    AtPoint {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Whether the error stems from a numerical failure rather than bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NotPositiveDefinite { .. } | Error::NonConvergence { .. } | Error::NonFinite(_) => {
                true
            }
            Error::AtPoint { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    pub(crate) fn at_point(index: usize, source: Error) -> Self {
        Error::AtPoint {
            index,
            source: Box::new(source),
        }
    }
}
