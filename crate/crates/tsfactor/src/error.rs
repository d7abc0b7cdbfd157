//! Error taxonomy shared across the whole crate.

use std::fmt;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Categorized failures. Every category maps to a stable machine-readable
/// name (see [`Error::category`]) and a process exit code used by the CLI.
#[derive(Debug)]
pub enum Error {
    /// Tensor/matrix shape disagreement.
    Dimension(String),
    /// Invalid configuration value or combination.
    Config(String),
    /// Non-finite value or other numeric breakdown.
    Numeric(String),
    /// Sequence exceeds the model context window.
    Length(String),
    /// Token id outside the vocabulary.
    Vocab(String),
    /// Sampling ended with no eligible token.
    Sampling(String),
    /// Unusable input data (empty set, too few samples, ...).
    Input(String),
    /// Operation requires state that has not been initialized.
    State(String),
    /// Malformed text input; `line` is 1-based.
    Parse { line: usize, message: String },
    /// File does not look like the expected format at all.
    Format(String),
    /// File matches the format but its content hash does not.
    Corruption(String),
    /// A derived artifact no longer matches its source checkpoint.
    Checksum(String),
    /// A referenced checkpoint file is absent.
    MissingCheckpoint(String),
    Io(std::io::Error),
}

impl Error {
    /// Stable lowercase category name for machine-readable error lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Config(_) => "config",
            Error::Numeric(_) => "numeric",
            Error::Length(_) => "length",
            Error::Vocab(_) => "vocab",
            Error::Sampling(_) => "sampling",
            Error::Input(_) => "input",
            Error::State(_) => "state",
            Error::Parse { .. } => "parse",
            Error::Format(_) => "format",
            Error::Corruption(_) => "corruption",
            Error::Checksum(_) => "checksum",
            Error::MissingCheckpoint(_) => "missing_checkpoint",
            Error::Io(_) => "io",
        }
    }

    /// CLI exit code: 2 missing checkpoint, 3 config, 4 numeric, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingCheckpoint(_) => 2,
            Error::Config(_) => 3,
            Error::Numeric(_) => 4,
            _ => 1,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Length(m) => write!(f, "length error: {m}"),
            Error::Vocab(m) => write!(f, "vocab error: {m}"),
            Error::Sampling(m) => write!(f, "sampling error: {m}"),
            Error::Input(m) => write!(f, "input error: {m}"),
            Error::State(m) => write!(f, "state error: {m}"),
            Error::Parse { line, message } => write!(f, "parse error at line {line}: {message}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Corruption(m) => write!(f, "corruption error: {m}"),
            Error::Checksum(m) => write!(f, "checksum error: {m}"),
            Error::MissingCheckpoint(m) => write!(f, "missing checkpoint: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
