use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("zonal degree {degree} exceeds the configured cap {cap}")]
    Capacity { degree: usize, cap: usize },

    #[error("decomposition failed: {0}")]
    Decomposition(String),

    #[error("degenerate figure: all landmarks coincide after centring")]
    DegenerateFigure,

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error(
        "series not converged by degree {degree}: partial value {partial:e}, tail estimate {tail:e}"
    )]
    Truncation {
        degree: usize,
        partial: f64,
        tail: f64,
    },

    #[error("specimen {specimen}: {source}")]
    Specimen {
        specimen: String,
        #[source]
        source: Box<Error>,
    },

    #[error("no start converged; best log-likelihood {best_loglik}")]
    NonConvergence { best_loglik: f64 },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Wraps an error with the identifier of the specimen that produced it.
    pub fn for_specimen(self, specimen: impl Into<String>) -> Self {
        Error::Specimen {
            specimen: specimen.into(),
            source: Box::new(self),
        }
    }

    /// True for failures caused by user input (parse or configuration),
    /// false for numerical failures.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::Parse { .. } | Error::Config(_) | Error::Io(_) => true,
            Error::Specimen { source, .. } => source.is_input_error(),
            _ => false,
        }
    }
}
