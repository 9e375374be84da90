use std::io;

/// Errors raised anywhere in the engine.
///
/// Every variant maps to one stable, machine-parsable kind string (see
/// [`Error::kind`]) which the CLI prints as the prefix of its one-line
/// failure message.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Shape(String),

    #[error("cannot broadcast dimension {dim}: extents {left} and {right}")]
    Broadcast { dim: usize, left: usize, right: usize },

    #[error("{0}")]
    Contract(String),

    #[error("{0}")]
    Config(String),

    #[error("at position {pos}: {msg}")]
    Parse { pos: usize, msg: String },

    #[error("at byte offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("{0}")]
    Input(String),

    #[error("{0}")]
    State(String),

    #[error("{0}")]
    Degenerate(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Broadcast { .. } => "broadcast",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Parse { .. } => "parse",
            Error::Format { .. } => "format",
            Error::Input(_) => "input",
            Error::State(_) => "state",
            Error::Degenerate(_) => "degenerate",
            Error::NonFinite(_) => "non-finite",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;
