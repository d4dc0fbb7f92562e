use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::OpKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: OpKind,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: shape {shape:?} does not hold {len} elements")]
    InvalidTensor { shape: Vec<usize>, len: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("loss does not belong to this tape")]
    NotOnTape,

    #[error("non-finite function value while probing coordinate {coord}")]
    NonFinite { coord: usize },

    #[error("no gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("invalid network dimensions: {0}")]
    InvalidDims(String),

    #[error("{what}: bad magic {found:#010x}")]
    BadMagic { what: &'static str, found: u32 },

    #[error("truncated {0}")]
    Truncated(&'static str),

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("phase violation: {0}")]
    PhaseViolation(String),

    #[error("modality mismatch: expected `{expected}`, got `{found}`")]
    ModalityMismatch { expected: String, found: String },

    #[error("broken association chain: `{0}` does not feed `{1}`")]
    BrokenChain(String, String),

    #[error("class {0} has no samples in `{1}`")]
    MissingClass(usize, String),

    #[error("dataset `{0}` is empty")]
    EmptyDataset(String),

    #[error("invalid split ratios: {0}")]
    InvalidRatios(String),

    #[error("split `{0}` would be empty")]
    EmptySplit(&'static str),

    #[error("feature dimension {0} is not a perfect square")]
    NotSquare(usize),

    #[error("dataset `{0}` has a single class")]
    SingleClass(String),

    #[error("missing component `{0}`")]
    MissingComponent(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::File { path, source }
    }
}
