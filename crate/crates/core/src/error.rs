use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("point outside the chart domain: {0}")]
    Domain(String),
    #[error("regime classification is ambiguous: {0}")]
    ClassificationAmbiguous(String),
    #[error("state is off the mass shell or the fiber: {0}")]
    StateInvalid(String),
    #[error("step rejected: {0}")]
    StepRejected(String),
    #[error("unsupported group: {0}")]
    UnsupportedGroup(String),
    #[error("element outside the NAK domain: {0}")]
    DecompositionOutOfDomain(String),
    #[error("theta extraction is degenerate")]
    ExtractionDegenerate,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("i/o failure: {0}")]
    Io(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    /// Stable numeric code, shared with the C interface.
    pub fn code(&self) -> i32 {
        match self {
            Error::Dimension { .. } => 1,
            Error::Domain(_) => 2,
            Error::ClassificationAmbiguous(_) => 3,
            Error::StateInvalid(_) => 4,
            Error::StepRejected(_) => 5,
            Error::UnsupportedGroup(_) => 6,
            Error::DecompositionOutOfDomain(_) => 7,
            Error::ExtractionDegenerate => 8,
            Error::InsufficientData(_) => 9,
            Error::InvalidConfig(_) => 10,
            Error::Io(_) => 11,
            Error::Internal(_) => 12,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
