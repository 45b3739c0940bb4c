use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },

    #[error("matrix not SPD: v^T A v = {0}")]
    NotSpd(f64),

    #[error("malformed CSR structure: {0}")]
    MalformedCsr(String),

    #[error("dense size guard exceeded: {rows}x{cols} > {limit}x{limit}")]
    DenseGuard { rows: usize, cols: usize, limit: usize },

    #[error("zero diagonal entry at row {0}")]
    ZeroDiagonal(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("incompatible family/grid: {0}")]
    IncompatibleGrid(String),

    #[error("indefinite operator: p^T A p = {0} at iteration {1}")]
    Indefinite(f64, usize),

    #[error("solver diverged (non-finite iterate) at iteration {0}")]
    Divergence(usize),

    #[error("coarse problem of size {0} exceeds the dense guard of {1}; recursive hierarchies are not supported")]
    CoarseTooLarge(usize, usize),

    #[error("singular matrix in dense solve")]
    Singular,

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
