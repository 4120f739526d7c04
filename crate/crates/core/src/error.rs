use oid_conic::ConicError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OidError {
    /// Invalid network or inverter data.
    #[error("model error: {0}")]
    Model(String),

    #[error("format error at {path}: {msg}")]
    Format { path: String, msg: String },

    #[error("partition error: {0}")]
    Partition(String),

    /// The conic solver failed or hit its iteration cap.
    #[error("solve failed ({context}): {msg}")]
    Solve { context: String, msg: String },

    /// The relaxation returned a matrix that is not rank one.
    #[error("relaxation not tight ({context}): lambda2/lambda1 = {ratio:.3e}")]
    Rank { context: String, ratio: f64 },

    #[error("protocol violation by {sender} in round {round}: {msg}")]
    Protocol { sender: String, round: u32, msg: String },

    #[error(transparent)]
    Conic(#[from] ConicError),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, OidError>;

pub(crate) fn model<T>(msg: impl Into<String>) -> Result<T> {
    Err(OidError::Model(msg.into()))
}
