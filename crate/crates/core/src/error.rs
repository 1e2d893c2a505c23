use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid word: letter {letter} outside 1..={dim}")]
    InvalidWord { letter: usize, dim: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("word of length {len} exceeds truncation depth {depth}")]
    Depth { len: usize, depth: usize },

    #[error("path has no observations")]
    EmptyPath,

    #[error("times must be strictly increasing (index {index})")]
    NonMonotoneTimes { index: usize },

    #[error("kernel matrix is singular or rank deficient")]
    Rank,

    #[error("{value} is not divisible by {divisor}")]
    Divisibility { value: usize, divisor: usize },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid label: {0}")]
    Label(String),

    #[error("R² undefined: targets are constant")]
    UndefinedR2,

    #[error("empty input: {0}")]
    Empty(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Divergence { epoch: usize, reason: String },

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// True for failures caused by non-finite or diverging numerics rather
    /// than malformed input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Divergence { .. } | Error::Rank)
    }
}
