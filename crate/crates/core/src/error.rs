use thiserror::Error;

/// Errors produced across the mapping-prior and detection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid transform: {0}")]
    InvalidTransform(String),

    #[error("degenerate rotation: {0}")]
    DegenerateRotation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("segment id {id} out of range for {num_segments} segments")]
    SegmentIndex { id: usize, num_segments: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("grids are not aligned: {0}")]
    Alignment(String),

    #[error("insufficient support: need {required} points, got {actual}")]
    InsufficientSupport { required: usize, actual: usize },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("scene spec error: {0}")]
    SceneSpec(String),

    #[error("decode error at byte offset {offset}: {reason}")]
    Decode { offset: u64, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
