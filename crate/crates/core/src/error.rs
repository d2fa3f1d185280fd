use std::path::PathBuf;

/// Errors produced by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("scene has no objects and no background points")]
    EmptyScene,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("length mismatch in {what}: expected {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("query ({x}, {y}) lies outside the grid range")]
    OutOfRange { x: f64, y: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("point {index} references unknown instance {instance}")]
    UnknownInstance { index: usize, instance: u32 },

    #[error("no threshold configured for class {0}")]
    UnknownClass(String),

    #[error("merged cloud carries no point labels; run labelling first")]
    MissingLabels,

    #[error("dynamic point {index} (instance {instance}, k = {k}) has no group transform")]
    UnassignedPoint { index: usize, instance: u32, k: u32 },

    #[error("instance {0} has no keyframe (k = 0) points")]
    MissingKeyframeGroup(u32),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("unsupported {format} version {found} (expected {expected})")]
    Version {
        format: String,
        found: u64,
        expected: u64,
    },

    #[error("I/O error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::LengthMismatch {
            what,
            expected,
            got,
        });
    }
    Ok(())
}
