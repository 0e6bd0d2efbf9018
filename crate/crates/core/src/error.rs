use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("exhausted after {draws} draws: {reason}")]
    Exhaustion { draws: usize, reason: String },

    #[error("degenerate range: {0}")]
    DegenerateRange(String),

    #[error("degenerate class: {0}")]
    DegenerateClass(String),

    #[error("unknown colour ({r}, {g}, {b}) at pixel (x={x}, y={y})")]
    UnknownColor { x: usize, y: usize, r: u8, g: u8, b: u8 },

    #[error("netpbm parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("truncated data: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("bad magic bytes: {0}")]
    BadMagic(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint header: {0}")]
    Header(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
