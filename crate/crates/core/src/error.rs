use std::fmt;
use std::path::PathBuf;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: String,
        expected: Shape,
        found: Shape,
    },

    #[error("channel mismatch in {context}: expected {expected} input channels, found {found}")]
    ChannelMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("tile shape mismatch: {0} vs {1}")]
    TileMismatch(TileDims, TileDims),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    #[error("{path}: byte offset {offset}: {msg}")]
    Format {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("event {index} at ({x}, {y}) is outside the {width}x{height} sensor")]
    OutOfBounds {
        index: usize,
        x: u32,
        y: u32,
        width: u32,
        height: u32,
    },

    #[error("model config: {0}")]
    Config(String),

    #[error("cycle detected through node `{0}`")]
    Cycle(String),

    #[error("node `{node}` references unknown input `{input}`")]
    UnknownNode { node: String, input: String },

    #[error("duplicate node id `{0}`")]
    DuplicateNode(String),

    #[error("missing weight tensor `{0}`")]
    MissingWeight(String),

    #[error("weight tensor `{0}` declared more than once")]
    DuplicateWeight(String),

    #[error("weight tensor `{0}` is not used by the model")]
    UnusedWeight(String),

    #[error("weight tensor `{name}` has shape {found:?}, model expects {expected:?}")]
    WeightShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("incremental step requested before any dense pass")]
    NotInitialized,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Tile dimensions carried in error messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileDims(pub usize, pub usize);

impl fmt::Display for TileDims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.0, self.1)
    }
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>, expected: Shape, found: Shape) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected,
            found,
        }
    }
}
