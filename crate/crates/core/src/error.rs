use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Site sets that do not nest or line up as required.
    #[error("support error: {0}")]
    Support(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A Hermitian or positivity contract was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("singular operator: {0}")]
    Singular(String),
    #[error("normalization error: trace is {0}, expected 1")]
    Normalization(f64),
    #[error("arity error: {0}")]
    Arity(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("temperature grid error: {0}")]
    Grid(String),
    #[error("ordering error: {0}")]
    Ordering(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("serialization error: {0}")]
    Serialization(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
