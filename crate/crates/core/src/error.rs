use thiserror::Error;

/// Errors raised by the concordance engine.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A value lies outside the domain of an operation (nonpositive count, negative S², ...).
    #[error("domain error: {0}")]
    Domain(String),
    /// Inconsistent arguments: dimension mismatches, empty inputs and the like.
    #[error("usage error: {0}")]
    Usage(String),
    /// The model configuration is not identifiable or the mean precision is singular.
    #[error("configuration error: {0}")]
    Configuration(String),
    /// A variance full conditional has no proper density.
    #[error("degenerate variance conditional for instrument {instrument}: {reason}")]
    DegenerateConditional { instrument: usize, reason: String },
    /// Runtime sampler failure (proposal budget exhausted, envelope escalation, ...).
    #[error("sampler error: {0}")]
    Sampler(String),
}

pub type Result<T> = std::result::Result<T, Error>;
