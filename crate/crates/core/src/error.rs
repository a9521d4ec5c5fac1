use thiserror::Error;

/// Errors produced across the library, named by failure kind.
#[derive(Debug, Error)]
pub enum CageError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("degenerate basis: {0}")]
    DegenerateBasis(String),

    #[error("support mismatch: {0}")]
    SupportMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unimplemented feature: {0}")]
    Unimplemented(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("insufficient draws: {0}")]
    InsufficientDraws(String),

    #[error("infeasible contiguity constraint: {0}")]
    InfeasibleContiguity(String),

    #[error("degenerate comparison: {0}")]
    DegenerateComparison(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CageError>;
