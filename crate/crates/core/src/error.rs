use std::io;

/// Errors produced by the numeric core, model, file formats and fine-tuning.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch on {axis}: expected {expected}, got {actual}")]
    Dimension {
        axis: String,
        expected: usize,
        actual: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("coordinate ({row}, {col}) is outside {extent}")]
    Coordinate { row: usize, col: usize, extent: String },

    #[error("input extent {height}x{width} is too small; minimum viable input is {min}x{min}")]
    Extent { height: usize, width: usize, min: usize },

    #[error("{0} is empty")]
    Empty(&'static str),

    #[error("layer `{0}` has no backward implementation")]
    UnsupportedLayer(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("unsupported format version {0}")]
    Version(u16),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("stale feature cache: built for trunk {cached:#018x}, model trunk is {current:#018x}")]
    StaleCache { cached: u64, current: u64 },

    #[error("palette error: {0}")]
    Palette(String),

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unknown {kind} `{id}`")]
    NotFound { kind: &'static str, id: String },

    #[error("busy: {0}")]
    Busy(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Stable machine-readable identifier for wire formats.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Config(_) => "config",
            Error::Coordinate { .. } => "coordinate",
            Error::Extent { .. } => "extent",
            Error::Empty(_) => "empty",
            Error::UnsupportedLayer(_) => "unsupported_layer",
            Error::Checksum { .. } => "checksum",
            Error::Version(_) => "version",
            Error::Format { .. } => "format",
            Error::StaleCache { .. } => "stale_cache",
            Error::Palette(_) => "palette",
            Error::Parse { .. } => "parse",
            Error::NotFound { .. } => "not_found",
            Error::Busy(_) => "busy",
            Error::Precondition(_) => "precondition",
            Error::Io(_) => "io",
        }
    }

    pub(crate) fn dim(axis: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            axis: axis.into(),
            expected,
            actual,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }
}
