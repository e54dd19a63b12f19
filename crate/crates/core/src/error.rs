use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated: {0}")]
    Truncated(String),

    #[error("zero dimension: {0}")]
    ZeroDimension(String),

    #[error("insufficient spikes: pixel has {available} spikes, ordinal {requested} requested")]
    InsufficientSpikes { requested: usize, available: usize },

    #[error("no-left-spike: no spike strictly before frame {tau}")]
    NoLeftSpike { tau: usize },

    #[error("no-right-spike: no spike at or after frame {tau}")]
    NoRightSpike { tau: usize },

    #[error("pixel ({x}, {y}) out of bounds for {width}x{height} stream")]
    PixelOutOfBounds { x: usize, y: usize, width: usize, height: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty mask: no valid pixels")]
    EmptyMask,

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}
