//! Error type shared by all modules.
//!
//! The CLI maps error classes to exit codes: configuration, format, and I/O
//! problems exit with 2; numerical failures (NaN losses, divergence,
//! non-convergence) exit with 3.

use thiserror::Error;

/// Unified error for the crate.
#[derive(Debug, Error)]
pub enum CoreError {
    /// Invalid configuration: bad values, unknown keys, unresolvable registry
    /// names, or violated model invariants.
    #[error("config error: {0}")]
    Config(String),

    /// A text artifact (MDP file, checkpoint, config, metrics) failed to
    /// parse. Line numbers are 1-based.
    #[error("{path}:{line}: {msg}")]
    Format {
        /// File the error was found in.
        path: String,
        /// 1-based line number.
        line: usize,
        /// What went wrong.
        msg: String,
    },

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Numerical failure during training or solving: NaN/inf in a loss,
    /// ratio divergence, or a fixed-point iteration that hit its cap.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Brute-force enumeration refused: the attacker-map product space is
    /// larger than the configured cap.
    #[error("enumeration cap exceeded: product of |B(s)| is {product:.3e}, cap is {cap:.3e}")]
    CapExceeded {
        /// Π_s |B(s)| for the requested instance.
        product: f64,
        /// Configured enumeration cap.
        cap: f64,
    },
}

impl CoreError {
    /// Process exit code the CLI should use for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CoreError::Numerical(_) => 3,
            _ => 2,
        }
    }

    /// Shorthand for a [`CoreError::Format`] at a given line.
    pub fn format(path: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        CoreError::Format {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
