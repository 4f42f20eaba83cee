use std::path::PathBuf;

/// Errors produced by the semloc pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("palette error: {0}")]
    Palette(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("aspect error: panorama {id} is {width}x{height}, expected width = 2 x height")]
    Aspect { id: String, width: usize, height: usize },

    #[error("duplicate id: {0}")]
    DuplicateId(String),

    #[error("unknown id: {0}")]
    UnknownId(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numerical failure: {0}")]
    NonFinite(String),

    #[error("shape error: {0}")]
    Shape(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format(_) => "format",
            Error::Palette(_) => "palette",
            Error::Dimension(_) => "dimension",
            Error::Aspect { .. } => "aspect",
            Error::DuplicateId(_) => "duplicate_id",
            Error::UnknownId(_) => "unknown_id",
            Error::Config(_) => "config",
            Error::Degenerate(_) => "degenerate",
            Error::NonFinite(_) => "non_finite",
            Error::Shape(_) => "shape",
        }
    }

    /// True for errors caused by an invalid configuration rather than by data.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
