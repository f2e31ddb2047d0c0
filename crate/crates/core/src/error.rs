use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument or configuration value is outside its valid domain.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A plaintext or scalar lies outside `[0, n)`.
    #[error("value out of range: {0}")]
    Range(String),

    /// A value does not fit the fixed-point codec or the target byte width.
    #[error("overflow: {0}")]
    Overflow(String),

    /// Ciphertext failed the decryption consistency check.
    #[error("ciphertext corrupted: {0}")]
    Corruption(String),

    /// Two ciphertexts (or a ciphertext and a key) come from different keys.
    #[error("key mismatch: {0}")]
    KeyMismatch(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Training produced a non-finite loss.
    #[error("numeric divergence: {0}")]
    NumericDivergence(String),

    /// The gradient-inversion attack cannot run on the given observation.
    #[error("attack inapplicable: {0}")]
    AttackInapplicable(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("frame too large: {len} bytes (max {max})")]
    FrameTooLarge { len: usize, max: usize },

    /// A remote peer failed or sent an ERROR frame.
    #[error("peer {peer}: {message}")]
    Peer { peer: String, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}
