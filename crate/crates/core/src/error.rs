use thiserror::Error;

/// Errors raised anywhere in the game, learning and experiment layers.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or settings that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),

    /// A value outside its admissible domain (token id out of range, negative count, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// A parameter invariant was broken (non-positive scale, non-finite entry, ...).
    #[error("invariant violated: {0}")]
    Invariant(String),

    /// Loss became non-finite or blew up during learning.
    #[error("learning diverged: {0}")]
    Divergence(String),

    /// Requested computation exceeds what the brute-force layer can enumerate.
    #[error("capability exceeded: {0}")]
    Capability(String),

    /// An oracle check did not pass.
    #[error("verification failed: {0}")]
    Verification(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
