//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input data; `line` is 1-based.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A numeric precondition of an operation was violated.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A coordinate is active in the data but its estimated activity
    /// probability is zero, so probability-scaled rules cannot use it.
    #[error("feature {coord} is active but has zero estimated activity probability")]
    StatsMismatch { coord: usize },

    /// Training produced a non-finite weight.
    #[error("divergence at iteration {iteration} ({samples_seen} samples): non-finite weight")]
    Divergence { iteration: u64, samples_seen: u64 },

    /// A brute-force enumeration would visit more states than the caller allowed.
    #[error("enumeration of {states} states exceeds cap {cap}")]
    EnumerationTooLarge { states: u128, cap: u128 },

    /// A step size violates the stability bound named in the message.
    #[error("step size too large: {0}")]
    StepTooLarge(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
