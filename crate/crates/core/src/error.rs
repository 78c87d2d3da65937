use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the explanation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("untaped target: variable {0} was not recorded on this tape")]
    UntapedTarget(usize),

    #[error("backward requires a scalar (0-dim) output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("config error: {0}")]
    Config(String),

    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("invalid model spec: {0}")]
    ModelSpec(String),

    #[error("no informative layers: every layer score is zero")]
    NoInformativeLayers,

    #[error("empty layer selection")]
    EmptySelection,

    #[error("missing heatmap for layer `{0}`")]
    MissingLayerMap(String),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),

    #[error("weight file: bad magic")]
    BadMagic,

    #[error("weight file: truncated header")]
    TruncatedHeader,

    #[error("weight file: truncated payload for `{0}`")]
    TruncatedPayload(String),

    #[error("weight file: inconsistent entry `{field}`: {reason}")]
    InconsistentEntry { field: String, reason: String },

    #[error("weight file: malformed header: {0}")]
    MalformedHeader(String),

    #[error("image: wrong magic, expected {expected}")]
    WrongImageMagic { expected: &'static str },

    #[error("image: unsupported maxval {0}, expected 255")]
    UnsupportedMaxval(u32),

    #[error("image: malformed header: {0}")]
    MalformedImageHeader(String),

    #[error("image: truncated pixel data (expected {expected} bytes, found {found})")]
    TruncatedPixelData { expected: usize, found: usize },

    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },

    #[error("empty manifest")]
    EmptyManifest,

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Attaches the offending path to an error.
    pub fn at(self, path: impl Into<PathBuf>) -> Error {
        Error::File {
            path: path.into(),
            source: Box::new(self),
        }
    }

    /// Strips any path context, returning the innermost error.
    pub fn root(&self) -> &Error {
        match self {
            Error::File { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
