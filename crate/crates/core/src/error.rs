use std::path::PathBuf;

use thiserror::Error;

/// Pipeline stage that produced a failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Detector,
    Alignment,
    Antispoofer,
    Extractor,
    Matcher,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Stage::Detector => "detector",
            Stage::Alignment => "alignment",
            Stage::Antispoofer => "antispoofer",
            Stage::Extractor => "extractor",
            Stage::Matcher => "matcher",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/mask dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Arguments violate an operation's domain (empty pools, degenerate
    /// geometry, out-of-range parameters).
    #[error("domain error: {0}")]
    Domain(String),

    /// Input data (manifests, prediction files, images) is malformed or
    /// insufficient.
    #[error("data error: {0}")]
    Data(String),

    /// A stage model failed; the stage identity is preserved so callers can
    /// attribute the failure.
    #[error("stage {stage} failed: {message}")]
    StageFailure { stage: Stage, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to decode image {path}: {message}")]
    ImageDecode { path: PathBuf, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
