use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported dtype code 0x{0:02x}")]
    UnsupportedDtype(u8),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("truncated input: {0}")]
    Truncated(String),

    #[error("trailing bytes after payload")]
    TrailingBytes,

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("index {index} out of range for {len} classes")]
    ClassOutOfRange { index: usize, len: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("store is normalized and frozen; further training is disabled")]
    Frozen,

    #[error("corrupt store: {0}")]
    Corrupt(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("degenerate statistic: {0}")]
    Degenerate(String),
}
