use thiserror::Error;

/// Errors produced by the simulator and its audits.
#[derive(Debug, Error)]
pub enum Error {
    #[error("wave vector must be nonzero")]
    ZeroWaveVector,

    #[error("wave vector ({0}, {1}) is not canonical (need k2 > 0, or k2 = 0 and k1 > 0)")]
    NonCanonical(i32, i32),

    #[error("duplicate wave vector ({0}, {1}) in spectrum")]
    DuplicateMode(i32, i32),

    #[error("invalid spectrum: {0}")]
    InvalidSpectrum(String),

    #[error("spectrum is degenerate (generator constant is zero)")]
    DegenerateSpectrum,

    #[error("grid mismatch: {0} vs {1}")]
    GridMismatch(usize, usize),

    #[error("distance between the two flows is zero")]
    ZeroDistance,

    #[error("direction undefined: particles coincide at label ({0}, {1})")]
    UndefinedDirection(usize, usize),

    #[error("operation not supported for this drift field: {0}")]
    UnsupportedDrift(&'static str),

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
