use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("ellipticity violated: {0}")]
    EllipticityViolation(String),

    #[error("assumption check `{check}` failed at {witness:?}: {detail}")]
    AssumptionViolation {
        check: &'static str,
        witness: Vec<f64>,
        detail: String,
    },

    #[error("reference level {0} outside the supported range [1, 24]")]
    ResourceGuard(u32),

    #[error("invalid level {level}: {reason}")]
    InvalidLevel { level: u32, reason: String },

    #[error("numerical blowup at step {step:?} of path {path_index:?}")]
    NumericalBlowup {
        step: Option<usize>,
        path_index: Option<u64>,
    },

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("incompatible paths: {0}")]
    IncompatiblePaths(String),

    #[error("singular matrix at state {witness:?}")]
    SingularMatrix { witness: Vec<f64> },

    #[error("coupling violation: {0}")]
    CouplingViolation(String),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("{failed} of {total} paths failed (first: {first})")]
    EnsembleFailure {
        failed: usize,
        total: usize,
        first: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// Attach step and path coordinates to a blowup raised by a single stepper.
    pub(crate) fn at(self, step: usize, path_index: u64) -> Self {
        match self {
            Error::NumericalBlowup { .. } => Error::NumericalBlowup {
                step: Some(step),
                path_index: Some(path_index),
            },
            other => other,
        }
    }
}
