use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("channel mismatch: kernel expects {expected} input channels, tensor has {found}")]
    ChannelMismatch { expected: usize, found: usize },

    #[error("kernel spatial dims must be odd, got {height}x{width}")]
    EvenKernel { height: usize, width: usize },

    #[error("Nyquist gain must lie strictly in (0, 1), got {0}")]
    BadGain(f64),

    #[error("band shift ({dx}, {dy}) outside [-{limit}, {limit}]")]
    ShiftOutOfRange { dx: i64, dy: i64, limit: i64 },

    #[error("dimension {dim} = {value} not divisible by ratio {ratio}")]
    NotDivisible { dim: &'static str, value: usize, ratio: usize },

    #[error("loss node must be scalar (1x1x1), got {0}")]
    NonScalarLoss(String),

    #[error("band index {index} out of range for {bands} bands")]
    BandOutOfRange { index: usize, bands: usize },

    #[error("non-finite value in {context}{}", iteration.map(|i| format!(" at iteration {i}")).unwrap_or_default())]
    NonFinite { context: String, iteration: Option<u32> },

    #[error("invalid profile: {0}")]
    InvalidProfile(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("bad file format in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the CLI contract: 2 = config/usage, 3 = numeric abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
