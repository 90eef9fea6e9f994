use thiserror::Error;

#[derive(Debug, Error)]
pub enum WacError {
    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("label {label} at pixel {pixel} is out of range for {classes} classes")]
    LabelOutOfRange {
        pixel: usize,
        label: usize,
        classes: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: u64, detail: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("empty result: {0}")]
    Empty(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, WacError>;

pub(crate) fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(WacError::Dimension {
            what,
            expected,
            actual,
        });
    }
    Ok(())
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(WacError::InvalidArgument(msg.into()))
}
