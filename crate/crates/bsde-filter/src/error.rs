use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Model evaluated at a point where it is not defined (drift singularity etc).
    #[error("domain error in model '{model}': {reason}")]
    Domain { model: String, reason: String },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    /// The filter can no longer represent the posterior (e.g. every sample has
    /// zero likelihood). The harness records such runs as failed.
    #[error("filter diverged at step {step}: {reason}")]
    FilterDiverged { step: usize, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
