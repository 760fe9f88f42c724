use std::path::PathBuf;

use thiserror::Error;

use crate::sparse::Coord;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("coordinate {coord:?} lies outside extent {extent:?}")]
    OutOfExtent { coord: Coord, extent: [i32; 3] },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("channel mismatch: expected {expected}, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },

    #[error("dimensionality mismatch: expected {expected}D, got {actual}D")]
    DimMismatch { expected: usize, actual: usize },

    #[error("duplicate coordinate {0:?}")]
    DuplicateCoordinate(Coord),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("query voxel {0:?} is not an active site")]
    InactiveQuery(Coord),

    #[error("frame has no active voxels")]
    NoActiveVoxels,

    #[error("timestamp {current} does not follow previous frame at {previous}")]
    NonMonotoneTimestamp { previous: f64, current: f64 },

    #[error("degenerate box with size {0:?}")]
    DegenerateBox([f64; 3]),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },

    #[error("unsupported format version {0}")]
    VersionUnsupported(u16),

    #[error("file truncated: {0}")]
    Truncated(String),

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("unknown tensor `{0}`")]
    UnknownTensor(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
