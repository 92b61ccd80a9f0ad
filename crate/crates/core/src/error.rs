use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration (bad prior, empty sets, malformed files).
    #[error("configuration error: {0}")]
    Config(String),

    /// A vector or matrix had the wrong length.
    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// A measurement or regressor contained NaN or infinity.
    #[error("non-finite input rejected: {0}")]
    NonFinite(&'static str),

    /// An MPC problem that should be feasible was declared infeasible.
    #[error("infeasibility fault at step {step} in {problem} problem: {detail}")]
    Infeasible {
        step: usize,
        problem: &'static str,
        detail: String,
        /// Serialized problem dump for post-mortem analysis.
        dump: Box<serde_json::Value>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            what,
            expected,
            got,
        })
    }
}
