//! Error type shared across the crate.

/// Errors surfaced by environment construction, training, solvers, and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid sizes, ranges, or cross-field inconsistencies in a config.
    #[error("configuration error: {0}")]
    Config(String),

    /// A linear solve or fixed-point iteration failed to meet its tolerance.
    #[error("numerical solve failed: {0}")]
    Numerics(String),

    /// The divergence detector fired or a loss became non-finite.
    #[error("training diverged: {0}")]
    Divergence(String),

    /// A dataset line could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 config, 3 divergence, 4 solver/oracle, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Divergence(_) => 3,
            Error::Numerics(_) => 4,
            _ => 1,
        }
    }
}
