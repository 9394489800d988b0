use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{kernel}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        kernel: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{kernel}: non-finite value in output")]
    NonFinite { kernel: &'static str },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("backward already ran on this tape")]
    BackwardTwice,
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite loss at step {step}: {loss}")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn shape(kernel: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            kernel,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
