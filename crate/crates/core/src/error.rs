use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("incompatible shapes {a:?} and {b:?}")]
    IncompatibleShapes { a: Vec<usize>, b: Vec<usize> },

    #[error("shape {shape:?} needs {expected} values, got {actual}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("source and target coincide (distance {distance:e}); the diagonal direction is undefined")]
    DegeneratePair { distance: f64 },

    #[error("minimum timestep {min_t} is at the terminal time")]
    SchedulerAtOne { min_t: f64 },

    #[error("density evaluated {distance:e} away from the target point")]
    SingularEvaluation { distance: f64 },

    #[error("no deposit landed inside the velocity grid")]
    EmptyGrid,

    #[error("negative integration step at entry {index}: {t_now} -> {t_next}")]
    NegativeStep { index: usize, t_now: f64, t_next: f64 },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64, dump: String },

    #[error("unknown kind `{0}`")]
    UnknownKind(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by the numerics rather than by inputs or files.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegeneratePair { .. }
                | Error::SchedulerAtOne { .. }
                | Error::SingularEvaluation { .. }
                | Error::EmptyGrid
                | Error::NegativeStep { .. }
                | Error::NonFiniteLoss { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
