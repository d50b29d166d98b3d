//! Error taxonomy shared by every module.
//!
//! Three failure classes matter to callers: bad configuration (reject before
//! any compute runs), contract violations (shape or mode mismatches between
//! otherwise valid values), and rotary position overflow (the one runtime
//! limit a bounded-cache policy is meant to keep unreachable). Parse and I/O
//! errors only occur at the harness boundary.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration; nothing was computed.
    #[error("configuration error: {0}")]
    Config(String),

    /// Structurally valid inputs that violate an operation's contract
    /// (shape mismatch, incompatible storage modes, out-of-range slice).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A rotary position exceeded the configured bound. Bounded-cache
    /// policies never trigger this; unbounded absolute positions do.
    #[error("position {position} exceeds the rotary bound {bound}")]
    PositionOverflow { position: u64, bound: u64 },

    /// Malformed scenario or report input, with serde's line/column context.
    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Shorthand for [`Error::Config`].
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Shorthand for [`Error::Contract`].
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
