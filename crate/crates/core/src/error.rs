use std::fmt;

/// Errors raised by tensor kernels, model configuration and the tracking pipeline.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Incompatible tensor extents.
    Dimension(String),
    /// Invalid architectural or tracker configuration.
    Config(String),
    /// An out-of-range scalar parameter (sigma, blend weight, ...).
    Parameter(String),
    /// Misuse of the gradient tape (e.g. backward from a non-scalar).
    Contract(String),
    /// Tracking could not proceed (box outside the frame, lost target).
    Tracking(String),
    /// Malformed input data (sequence files, annotations, lengths).
    Input(String),
    /// Checkpoint encode/decode failure.
    Checkpoint(String),
    /// Training diverged.
    Divergence { step: usize, detail: String },
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::Parameter(m) => write!(f, "parameter error: {m}"),
            Error::Contract(m) => write!(f, "contract error: {m}"),
            Error::Tracking(m) => write!(f, "tracking error: {m}"),
            Error::Input(m) => write!(f, "input error: {m}"),
            Error::Checkpoint(m) => write!(f, "checkpoint error: {m}"),
            Error::Divergence { step, detail } => {
                write!(f, "training diverged at step {step}: {detail}")
            }
            Error::Io(m) => write!(f, "io error: {m}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Dimension(format!($($arg)*))
    };
}
pub(crate) use dim_err;
