use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by front-ends to pick exit statuses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Input,
    Infeasible,
    Degenerate,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed container: {0}")]
    Format(String),

    #[error("layer {layer}: {msg}")]
    Layer { layer: usize, msg: String },

    #[error("tensor {tensor}: {msg}")]
    Tensor { tensor: usize, msg: String },

    #[error("shape mismatch at layer {layer}: expected {expected:?}, got {actual:?}")]
    Shape {
        layer: usize,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("estimator precondition failed: {0}")]
    Estimator(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("degenerate observer layer {layer}: {msg}")]
    DegenerateObserver { layer: usize, msg: String },

    #[error("no observer layer passed |rho| > {tau}; lower the threshold or enlarge the sweep")]
    NoObservers { tau: f64 },

    #[error("budget {budget} is infeasible: minimum achievable cost is {min_cost}")]
    Infeasible { budget: f64, min_cost: f64 },

    #[error("instance too large for exhaustive search: {0} configurations")]
    TooLarge(u128),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io { .. } => ErrorClass::Io,
            Error::Infeasible { .. } => ErrorClass::Infeasible,
            Error::Degenerate(_) | Error::DegenerateObserver { .. } | Error::NoObservers { .. } => {
                ErrorClass::Degenerate
            }
            _ => ErrorClass::Input,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
