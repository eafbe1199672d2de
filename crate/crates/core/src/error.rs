use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at layer {layer}: expected {expected:?}, got {actual:?}")]
    Shape {
        layer: usize,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("tensor data length {len} does not match shape {shape:?}")]
    TensorLength { shape: Vec<usize>, len: usize },

    #[error("invalid architecture: {0}")]
    Architecture(String),

    #[error("activation trace does not belong to this network: {0}")]
    StaleTrace(String),

    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("fine class {0} assigned to more than one superclass")]
    DuplicateClass(usize),

    #[error("fine class {0} is missing from the superclass map")]
    MissingClass(usize),

    #[error("superclass {0} has no member classes")]
    EmptySuperclass(usize),

    #[error("malformed superclass map line {line}: {reason}")]
    MapSyntax { line: usize, reason: String },

    #[error("superclass id {id} out of range (N = {n})")]
    InvalidSuperclass { id: usize, n: usize },

    #[error("fine label {0} not covered by the superclass map")]
    UncoveredLabel(usize),

    #[error("new classes overlap the existing superclass map: {0:?}")]
    OverlappingClasses(Vec<usize>),

    #[error("ensemble component not ready: {0}")]
    NotReady(String),

    #[error("mediator distribution required (mediator weight {0}) but absent")]
    MissingMediator(f64),

    #[error("{path}: wrong IDX magic 0x{found:08x}, expected 0x{expected:08x}")]
    IdxMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("{path}: truncated IDX payload ({reason})")]
    IdxTruncated { path: PathBuf, reason: String },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("archive checksum mismatch")]
    Checksum,

    #[error("not a model archive (bad magic)")]
    ArchiveMagic,

    #[error("unsupported archive version {0}")]
    ArchiveVersion(u32),

    #[error("archive is missing parameter blob `{0}`")]
    MissingBlob(String),

    #[error("corrupt archive: {0}")]
    ArchiveCorrupt(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
