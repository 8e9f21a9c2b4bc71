use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{axis} index {index} out of bounds (size {bound})")]
    IndexOutOfBounds {
        axis: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value {value} at {location}")]
    NonFinite { location: String, value: f64 },

    #[error(
        "jacobi svd did not converge after {sweeps} sweeps (off-diagonal mass {off_diagonal:e})"
    )]
    NoConvergence { sweeps: usize, off_diagonal: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("layer `{name}`: {source}")]
    Layer {
        name: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Manifest(#[from] ManifestError),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn in_layer(self, name: &str) -> Self {
        match self {
            e @ Error::Layer { .. } => e,
            e => Error::Layer {
                name: name.to_string(),
                source: Box::new(e),
            },
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Problems with a model manifest or the weight files it references.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ManifestError {
    #[error("manifest is not valid JSON for this format: {0}")]
    Parse(String),

    #[error("unsupported format_version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("duplicate layer name `{0}`")]
    DuplicateName(String),

    #[error("invalid layer name `{0}` (allowed: ASCII letters, digits, '_', '-', '.')")]
    InvalidName(String),

    #[error("layer `{layer}`: invalid shape: {detail}")]
    InvalidShape { layer: String, detail: String },

    #[error("layer `{layer}`: expects {found} input channels but its input provides {expected}")]
    ChannelMismatch {
        layer: String,
        expected: usize,
        found: usize,
    },

    #[error("layer `{layer}`: has_bias is {has_bias} but bias file is {}", if *has_bias { "missing" } else { "present" })]
    BiasMismatch { layer: String, has_bias: bool },

    #[error("layer `{layer}`: invalid decoupled entry: {detail}")]
    InvalidDecoupling { layer: String, detail: String },

    #[error("layer `{layer}`: invalid pair entry: {detail}")]
    InvalidPair { layer: String, detail: String },

    #[error("layer `{layer}`: unsupported dtype `{dtype}` (only f32 is supported)")]
    UnsupportedDtype { layer: String, dtype: String },

    #[error("layer `{layer}`: weight path `{path}` must be relative and stay inside the model directory")]
    UnsafePath { layer: String, path: String },

    #[error("weight file {} does not exist", path.display())]
    MissingFile { path: PathBuf },

    #[error("weight file {}: expected {expected} bytes, found {actual}", path.display())]
    SizeMismatch {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("weight file {}: non-finite value {value} at element {index}", path.display())]
    NonFiniteWeight {
        path: PathBuf,
        index: usize,
        value: f32,
    },
}
