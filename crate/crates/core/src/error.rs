use std::path::PathBuf;

use crate::geometry::ClassId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid box [{x1}, {y1}, {x2}, {y2}]: {reason}")]
    InvalidBox {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        reason: &'static str,
    },

    #[error("score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),

    #[error("box lies entirely outside the {width}x{height} feature extent")]
    OutOfExtent { width: f64, height: f64 },

    #[error("invalid feature map: {0}")]
    InvalidFeatureMap(String),

    #[error("embedding length {got} does not match feature space dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("zero-norm {0} vector")]
    ZeroNorm(&'static str),

    #[error("no shots provided for novel class {0}")]
    MissingShots(ClassId),

    #[error("no prototype for class {0}")]
    MissingPrototype(ClassId),

    #[error("no feature map for image {0}")]
    MissingFeatures(u64),

    #[error("parameter vectors differ in length: {teacher} vs {student}")]
    LengthMismatch { teacher: usize, student: usize },

    #[error("teacher has not been initialized")]
    TeacherNotWarmed,

    #[error("non-finite {what} at iteration {iteration}")]
    Diverged { what: &'static str, iteration: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("infeasible world: {0}")]
    InfeasibleWorld(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Validation failures are caused by bad inputs (configs, files,
    /// invariants); everything else is a runtime failure.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Context { source, .. } => source.is_validation(),
            Error::Io { .. } | Error::Diverged { .. } | Error::TeacherNotWarmed => false,
            _ => true,
        }
    }
}

pub(crate) trait ResultExt<T> {
    fn context_with<F: FnOnce() -> String>(self, f: F) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn context_with<F: FnOnce() -> String>(self, f: F) -> Result<T> {
        self.map_err(|e| e.context(f()))
    }
}
