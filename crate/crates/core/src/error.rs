use alloc::string::String;

/// Errors raised by the core kernels.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("empty sequence")]
    EmptySequence,
    #[error("target length must be at least 1")]
    ZeroTargetLength,
    #[error("fps must be positive and finite, got {0}")]
    InvalidFps(f64),
    #[error("invalid control state at frame {frame}: {message}")]
    InvalidControl { frame: usize, message: String },
    #[error("degenerate frame {frame}: all points coincide")]
    DegenerateFrame { frame: usize },
    #[error("alignment did not converge at frame {frame} (residual {residual:e})")]
    AlignmentDiverged { frame: usize, residual: f64 },
    #[error("record {index} ({label}): {controls} control frames vs {keypoints} keypoint frames")]
    RecordLengthMismatch {
        index: usize,
        label: String,
        controls: usize,
        keypoints: usize,
    },
    #[error("unknown label `{label}`; supported categories: {supported}")]
    UnknownLabel { label: String, supported: String },
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("no prototypes available")]
    EmptyLibrary,
    #[error("invalid eye geometry: {0}")]
    InvalidGeometry(String),
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("unknown category `{0}`")]
    UnknownCategory(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
