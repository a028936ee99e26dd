use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape for {op}: {reason}")]
    InvalidShape { op: &'static str, reason: String },

    #[error("{op} expects a {expected} value")]
    KindMismatch {
        op: &'static str,
        expected: &'static str,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("FFT extent {0} is not a power of two")]
    NotPowerOfTwo(usize),

    #[error("point ({x}, {y}) lies outside the grid domain")]
    OutOfDomain { x: f64, y: f64 },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("variable {var} is not a node of this graph (graph has {len} nodes)")]
    ForeignVar { var: usize, len: usize },

    #[error(
        "unstable time step: c_max * lambda / 4 = {ratio:.6} > 1 at frequency bin ({row}, {col}); \
         largest admissible dt is {max_dt:.6e}"
    )]
    Unstable {
        row: usize,
        col: usize,
        ratio: f64,
        max_dt: f64,
    },

    #[error("imaginary residue {0:.3e} after inverse transform exceeds tolerance")]
    ImaginaryResidue(f64),

    #[error("speed {value} at ({x}, {y}) violates bounds [{lo}, {hi}]")]
    SpeedBounds {
        value: f64,
        x: f64,
        y: f64,
        lo: f64,
        hi: f64,
    },

    #[error("resampling budget exhausted while drawing ellipse {0}")]
    SamplingBudget(usize),

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("ground truth has zero norm")]
    ZeroNorm,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("non-finite loss at iteration {0}")]
    NonFiniteLoss(usize),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("metrics file: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
