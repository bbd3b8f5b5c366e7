use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("loss must be a scalar, got {0} elements")]
    NotScalar(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("expected {expected} parameter tensors, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("size {got} too small, need at least {min}")]
    SizeTooSmall { got: usize, min: usize },

    #[error("bad scan geometry: {0}")]
    BadGeometry(String),

    #[error("image too small for feature extraction: {0}")]
    ImageTooSmall(String),

    #[error("patch size {patch} exceeds image extent {image}")]
    PatchTooLarge { patch: usize, image: usize },

    #[error("training diverged at iteration {iteration}: loss is not finite")]
    Diverged { iteration: usize },

    #[error("checkpoint checksum mismatch (file truncated or corrupt)")]
    ChecksumMismatch,

    #[error("unrecognized file magic (wrong format or version)")]
    VersionMismatch,

    #[error("malformed {kind} file {path}: {reason}")]
    Format {
        kind: &'static str,
        path: PathBuf,
        reason: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(
        kind: &'static str,
        path: impl Into<PathBuf>,
        reason: impl Into<String>,
    ) -> Self {
        Error::Format {
            kind,
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
