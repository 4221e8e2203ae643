use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("{path}: {msg} (at byte offset {offset})")]
    Format {
        path: String,
        offset: u64,
        msg: String,
    },
    #[error("wav: {0}")]
    Wav(String),
    #[error("config: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {msg}")]
    Diverged { step: u64, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
