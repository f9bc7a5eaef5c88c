use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Argument outside the mathematical domain of a function.
    #[error("{function}: argument {value} outside domain ({expected})")]
    Domain {
        function: &'static str,
        value: f64,
        expected: &'static str,
    },

    /// Caller violated an operation precondition.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Mismatched dimensions or malformed structure.
    #[error("structural error: {0}")]
    Structural(String),

    /// A numerical oracle was asked to work outside its validated range.
    #[error("oracle range: {0}")]
    OracleRange(String),

    /// Training produced a non-finite loss.
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
