use thiserror::Error;

/// Errors raised by the forecasting library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("ingestion error: {0}")]
    Ingest(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range (len {len})")]
    OutOfRange { index: usize, len: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("singular normal equations ({0}); use ridge or PLS with lambda > 0")]
    Singular(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("forecast window {index} failed: {source}")]
    Window {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by the input data rather than the numerics.
    pub fn is_data_error(&self) -> bool {
        match self {
            Error::Ingest(_)
            | Error::InsufficientData(_)
            | Error::Domain(_)
            | Error::Shape(_)
            | Error::Io(_)
            | Error::Csv(_) => true,
            Error::Window { source, .. } => source.is_data_error(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
