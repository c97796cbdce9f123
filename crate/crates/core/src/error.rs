use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: parse error: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("{path}: unreadable image: {message}")]
    Image { path: PathBuf, message: String },

    #[error("{path}: {images} images but {poses} poses")]
    CountMismatch {
        path: PathBuf,
        images: usize,
        poses: usize,
    },

    #[error("{path}: resolution {got_w}x{got_h} differs from {want_w}x{want_h}")]
    ResolutionMismatch {
        path: PathBuf,
        want_w: usize,
        want_h: usize,
        got_w: usize,
        got_h: usize,
    },

    #[error("{path}: no pose for image {image}")]
    MissingPose { path: PathBuf, image: String },

    #[error("configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for errors caused by bad user input rather than internal failure.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::NonFinite(_))
    }
}
