use thiserror::Error;

/// Errors raised by charts, baselines and diagnostics.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid margins: {0}")]
    InvalidMargins(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: String, found: String },

    #[error("parameter count mismatch: expected {expected}, found {found}")]
    ParamCount { expected: usize, found: usize },

    /// A feasibility interval came out empty. Only reachable through corrupted
    /// budget bookkeeping or margins that do not balance.
    #[error("infeasible state: lower bound {lower} exceeds upper bound {upper}")]
    InfeasibleState { lower: f64, upper: f64 },

    #[error("cell ({row}, {col}) is on the boundary of its interval (fraction {fraction}); the chart inverse is undefined there")]
    BoundaryPoint {
        row: usize,
        col: usize,
        fraction: f64,
    },

    #[error("cell ({row}, {col}) has a degenerate interval of width {width}")]
    DegenerateInterval { row: usize, col: usize, width: f64 },

    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("matrix entry ({row}, {col}) = {value} violates the constraint")]
    InvalidEntry { row: usize, col: usize, value: f64 },

    #[error("size {n} exceeds the supported maximum {max}")]
    TooLarge { n: usize, max: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("invalid specification: {0}")]
    InvalidSpec(String),
}

pub type Result<T> = std::result::Result<T, Error>;
