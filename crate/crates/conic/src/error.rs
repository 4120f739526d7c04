use thiserror::Error;

/// Errors raised by the conic layer.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConicError {
    #[error("matrix is not Hermitian (max deviation {deviation:.3e})")]
    NotHermitian { deviation: f64 },

    #[error("matrix is not symmetric (max deviation {deviation:.3e})")]
    NotSymmetric { deviation: f64 },

    #[error("eigendecomposition failed: {0}")]
    Eigen(String),

    /// The top two eigenvalues are too close for a rank-one factor to exist.
    #[error("matrix is not rank one: lambda2/lambda1 = {ratio:.3e}")]
    Rank { ratio: f64 },

    #[error("invalid program: {0}")]
    InvalidProgram(String),
}

pub type Result<T> = std::result::Result<T, ConicError>;
