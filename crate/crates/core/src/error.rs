use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid nucleotide {letter:?} at position {position}")]
    Alphabet { letter: char, position: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("incomplete state: {0}")]
    State(String),

    #[error("policy update failed: {0}")]
    Update(String),

    #[error("batch collection failed: {0}")]
    Batch(String),

    #[error(transparent)]
    Oracle(#[from] OracleError),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }

    /// True for errors caused by bad numerics or training, as opposed to bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Update(_) | Error::Batch(_) | Error::Range(_))
    }
}

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("oracle command timed out after {seconds:.3}s")]
    Timeout { seconds: f64 },

    #[error("oracle command exited with {status}: {stderr}")]
    Exit { status: String, stderr: String },

    #[error("oracle output could not be parsed: {0}")]
    Parse(String),

    #[error("oracle invocation failed: {0}")]
    Spawn(String),

    #[error("oracle rejected input: {0}")]
    Input(String),
}
