use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("zero extent in shape {0:?}")]
    ZeroExtent(Vec<usize>),

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward called on an empty tape")]
    EmptyTape,

    #[error("gradient check requires f64 inputs; f32 finite differences are too noisy")]
    PrecisionInsufficient,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{op}: spatial action needs a square map, got {h}x{w}")]
    NonSquare { op: &'static str, h: usize, w: usize },

    #[error("scaling extent {extent} by {factor} does not give an integer extent")]
    NonIntegerExtent { extent: usize, factor: String },

    #[error("valid region is empty")]
    EmptyMask,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid layout `{text}`: {reason}")]
    Layout { text: String, reason: String },

    #[error("layer {index}: {reason}")]
    ModelShape { index: usize, reason: String },

    #[error("layer {0} has no group layout attached")]
    MissingLayout(usize),

    #[error("no pooled maps for monitored layer {0}")]
    MissingMonitoredLayer(usize),

    #[error("config error at `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("bad magic 0x{found:08x} in {what}")]
    BadMagic { what: String, found: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("extent overflow in IDX header: {0:?}")]
    ExtentOverflow(Vec<u32>),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint config hash {found:016x} does not match model config {expected:016x}")]
    HashMismatch { found: u64, expected: u64 },

    #[error("learning-rate schedule has no entry for epoch {epoch} (length {total})")]
    ScheduleExhausted { epoch: f64, total: f64 },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

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
