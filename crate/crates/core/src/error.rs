use thiserror::Error;

/// Errors raised by model evaluation, linear algebra and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// A model function produced a non-finite value.
    #[error("non-finite value in {what} at index {index}")]
    Domain { what: &'static str, index: usize },

    /// A factorization or solve failed on a matrix that should be well conditioned.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Invalid configuration or arguments.
    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Returns `Err(Error::Domain)` pointing at the first non-finite entry.
pub(crate) fn check_finite(what: &'static str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::Domain { what, index }),
        None => Ok(()),
    }
}
