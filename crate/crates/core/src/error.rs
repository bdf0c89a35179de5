use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("{0} must not be empty")]
    Empty(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no hallucination source: no example has a stem of at least {min_stem} characters")]
    NoHallucinationSource { min_stem: usize },

    #[error("insufficient data for subsample: need {needed}, have {available}")]
    InsufficientData { needed: usize, available: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("sequence of length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("decoder prefix must start with BOS")]
    MissingBos,

    #[error("requested {requested} checkpoints but only {available} exist")]
    NotEnoughCheckpoints { requested: usize, available: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("vocabulary hash mismatch: expected {expected}, found {found}")]
    VocabularyMismatch { expected: String, found: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}
