use std::io;

use thiserror::Error;

/// Errors produced anywhere in the follower.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Factorization or other numerical failure.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed MIDI or WAV input.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    /// Invalid configuration value or missing required input.
    #[error("config error: {0}")]
    Config(String),

    /// Missing audio device or similar host limitation.
    #[error("environment error: {0}")]
    Environment(String),

    /// Input is too degenerate for the requested fit.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Not enough resolvable harmonic peaks for a fit.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) => 1,
            Error::Io(_) | Error::Parse { .. } | Error::Environment(_) => 2,
            Error::Numeric(_) | Error::Degenerate(_) | Error::InsufficientData(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
