use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: unknown tag `{tag}`")]
    UnknownTag { line: usize, tag: String },

    #[error("line {line}: unknown entity type `{entity_type}`")]
    UnknownType { line: usize, entity_type: String },

    #[error("invalid label set: {0}")]
    InvalidLabelSet(String),

    #[error("invalid document: {0}")]
    InvalidDocument(String),

    #[error("missing `{0}` tag layer")]
    MissingLayer(&'static str),

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("overlapping spans: {0}")]
    OverlappingSpans(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
