use std::path::PathBuf;

/// Errors produced while loading, validating or evaluating benchmark data.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected_width}x{expected_height}, found {found_width}x{found_height}")]
    DimensionMismatch {
        expected_width: usize,
        expected_height: usize,
        found_width: usize,
        found_height: usize,
    },

    #[error("non-finite score at pixel index {index}")]
    NonFiniteScore { index: usize },

    #[error("no anomaly pixels left after void exclusion")]
    NoPositives,

    #[error("no not-anomaly pixels left after void exclusion")]
    NoNegatives,

    #[error("dataset has no ground-truth anomaly components")]
    NoGroundTruthComponents,

    #[error("size stratification needs at least {bins} components, found {found}")]
    TooFewComponents { found: usize, bins: usize },

    #[error("mask submitted for image `{0}` which is not in the manifest")]
    UnknownImage(String),

    #[error("missing {kind} for image `{id}`")]
    MissingInput { kind: &'static str, id: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unexpected label value {value} at row {row}, column {col}")]
    BadEncoding { value: u16, row: usize, col: usize },

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("score payload holds {found} bytes, header implies {expected}")]
    HeaderMismatch { expected: usize, found: usize },

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("scene spec cannot be satisfied: {0}")]
    UnsatisfiableSpec(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
