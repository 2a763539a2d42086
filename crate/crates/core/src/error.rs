use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: extent {extent} is not divisible by {factor}")]
    NotDivisible {
        op: &'static str,
        extent: usize,
        factor: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("timestep {t} out of range 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("DDIM transition requires t > t_prev, got t={t}, t_prev={t_prev}")]
    TimestepOrder { t: usize, t_prev: usize },

    #[error("patch at origin {origin:?} with extent {extent:?} exceeds volume {volume:?}")]
    PatchOutOfBounds {
        origin: [usize; 3],
        extent: [usize; 3],
        volume: [usize; 3],
    },

    #[error("distance undefined: at least one mask is empty")]
    UndefinedDistance,

    #[error("file format: {0}")]
    Format(String),

    #[error("format version mismatch: file has {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("unknown parameter path `{0}`")]
    UnknownParameter(String),

    #[error("missing parameter path `{0}`")]
    MissingParameter(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
