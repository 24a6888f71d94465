use std::path::PathBuf;

/// Errors surfaced by the library.
///
/// Shape and argument problems are reported eagerly, before any state is
/// mutated, so callers can treat every operation as transactional.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A matrix or layer was fed an operand of the wrong dimensions.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// A scalar or structural argument is outside its legal range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A class label lies outside `[0, num_classes)`.
    #[error("label {label} out of range for {classes} classes (row {row})")]
    LabelOutOfRange {
        label: usize,
        classes: usize,
        row: usize,
    },

    /// Config or scenario file could not be parsed.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    /// A cache record or activation dump failed structural validation.
    #[error("malformed record {path:?}: {message}")]
    Record { path: PathBuf, message: String },

    /// No feasible plan exists under the given memory model.
    #[error("infeasible plan: {0}")]
    Infeasible(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn invalid(message: impl ToString) -> Self {
        Error::InvalidArgument(message.to_string())
    }
}
