use std::path::PathBuf;

use rehab_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{source_name}:{line}: {msg}")]
    Parse {
        source_name: String,
        line: u64,
        msg: String,
    },
    #[error("{source_name}:{line}: expected {expected} columns, found {found}")]
    ColumnCount {
        source_name: String,
        line: u64,
        expected: usize,
        found: usize,
    },
    #[error("{source_name}: frame {frame} has {found} keypoints, expected {expected}")]
    KeypointCount {
        source_name: String,
        frame: usize,
        found: usize,
        expected: usize,
    },
    #[error("{source_name}: frame {frame} keypoint {keypoint} confidence {value} outside [0, 1]")]
    ConfidenceRange {
        source_name: String,
        frame: usize,
        keypoint: usize,
        value: f64,
    },
    #[error("segment has {len} time steps; at least 2 are needed for normalization")]
    DegenerateSegment { len: usize },
    #[error("segment has {len} time steps, shorter than the window length {window}")]
    SegmentTooShort { len: usize, window: usize },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("label {0} appears in more than one merge pair")]
    OverlappingMerge(u8),
    #[error("unknown participant {0}")]
    UnknownParticipant(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        CoreError::Invalid(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CoreError::Config(msg.into())
    }

    /// True for failures caused by the filesystem rather than by content.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            CoreError::Io { .. } | CoreError::Tensor(TensorError::Io(_))
        )
    }
}
