use thiserror::Error;

/// Failures raised by the dense matrix kernels.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("{op}: dimension mismatch, left is {left:?}, right is {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op}: matrix must be square, got {rows}x{cols}")]
    NotSquare { op: &'static str, rows: usize, cols: usize },
    #[error("data length {got} does not match {rows}x{cols}")]
    InvalidData { rows: usize, cols: usize, got: usize },
    #[error("qr: matrix has fewer rows ({rows}) than columns ({cols})")]
    WideMatrix { rows: usize, cols: usize },
    #[error(
        "qr: column {column} collapsed to norm {norm:e} (reference {reference:e}); \
         the basis lost rank, shorten the propagation between reorthonormalizations"
    )]
    RankDeficient { column: usize, norm: f64, reference: f64 },
    #[error("triangular solve: diagonal entry {index} is {value:e}")]
    SingularTriangular { index: usize, value: f64 },
    #[error("{op}: non-finite entry in input")]
    NonFinite { op: &'static str },
}

/// Crate-level error.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("{0} is not supported for this architecture")]
    Unsupported(&'static str),
    #[error("trajectory diverged (non-finite state) at step {step}")]
    Diverged { step: usize },
    #[error("non-finite gradient first appeared at step {step}")]
    NonFiniteGradient { step: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error(
        "basis condition R11/Rkk = {ratio:e} exceeds {limit:e} at step {step}; \
         reduce the reorthonormalization interval"
    )]
    IllConditioned { step: usize, ratio: f64, limit: f64 },
    #[error("extended precision: {0}")]
    Precision(String),
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;
