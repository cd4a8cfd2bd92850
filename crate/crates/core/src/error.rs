use std::io;

use thiserror::Error;

/// Errors raised by the pipeline. Variants map one-to-one onto the error
/// families reported by the command-line exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("pool error: {0}")]
    Pool(String),
    #[error("capacity error: requested top-{k} from a pool of {n} entries")]
    Capacity { k: usize, n: usize },
    #[error("retrieval error: {0}")]
    Retrieval(String),
    #[error("schedule error: timestep {t} outside 1..={max}")]
    Schedule { t: usize, max: usize },
    #[error("sampling produced non-finite values at timestep {t}")]
    Sampling { t: usize },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("gradient check error: {0}")]
    Check(String),
    #[error("training diverged: non-finite loss at step {step}")]
    Diverged { step: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// Structured failures while decoding one of the binary file formats.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },
    #[error("bad endianness marker {0:#010x}")]
    Endianness(u32),
    #[error("file truncated at byte offset {offset} (needed {needed} more bytes)")]
    Truncated { offset: u64, needed: u64 },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("malformed content: {0}")]
    Malformed(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}
