use thiserror::Error;

/// Errors raised across the sampler, its oracles and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter outside its domain: {0}")]
    Domain(String),

    #[error("mirror-map range violated at indices {indices:?}")]
    Range { indices: Vec<usize> },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("model inconsistency: {0}")]
    Model(String),

    #[error("non-finite value in {what} at index {index}")]
    Numerical { what: &'static str, index: usize },

    #[error("enumeration needs {size} terms, above the limit of {limit}")]
    EnumerationTooLarge { size: u128, limit: u128 },

    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("denoiser failed: {0}")]
    Denoiser(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("sweep {sweep}, step {step}: {source}")]
    Step {
        sweep: usize,
        step: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the error class: configuration 2, model 3,
    /// numerical 4, anything else 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Format(_) | Error::Io(_) => 2,
            Error::Model(_) | Error::LengthMismatch { .. } | Error::IndexOutOfRange { .. } => 3,
            Error::Numerical { .. } | Error::Range { .. } | Error::Domain(_) => 4,
            Error::Step { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
