use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the odometry toolkit.
#[derive(Error, Debug)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed KITTI scan {path}: {len} bytes is not a multiple of 16")]
    MalformedLength { path: PathBuf, len: u64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid range interval [{r_min}, {r_max}]")]
    InvalidInterval { r_min: f64, r_max: f64 },

    #[error("range {range} outside [{r_min}, {r_max}]")]
    OutOfRange { range: f64, r_min: f64, r_max: f64 },

    #[error("degenerate geometry: {0}")]
    Degenerate(&'static str),

    #[error("insufficient neighbours: index {index} needs {needed} on each side in a scan of {len} points")]
    InsufficientNeighbors {
        index: usize,
        needed: usize,
        len: usize,
    },

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("timestamps do not advance between frames {0} and {1}")]
    ZeroDt(usize, usize),

    #[error("velocity undefined for frame {0}")]
    NoPreviousFrame(usize),

    #[error("map is empty")]
    EmptyMap,
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
