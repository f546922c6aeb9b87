use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("value {value} at flat index {index} is not exactly -1 or +1")]
    NotBinary { index: usize, value: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid neighbour count k={k} for a graph with {n} nodes (need 1 <= k <= n-1)")]
    InvalidK { k: usize, n: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("invalid model description: {0}")]
    Spec(String),

    #[error("invalid layer parameters: {0}")]
    Params(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown configuration keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),

    #[error("not a model file (bad magic {0:02x?})")]
    BadMagic([u8; 4]),

    #[error("unsupported model file version {0}")]
    BadVersion(u16),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("malformed model file: {0}")]
    Format(String),

    #[error("{}:{line}: {msg}", .path.display())]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("backward called without a recorded forward tape")]
    MissingTape,

    #[error("distillation stage requires a teacher model")]
    MissingTeacher,
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
