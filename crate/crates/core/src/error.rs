use std::path::PathBuf;

use thiserror::Error;

use crate::optimize::RunTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty target cloud")]
    EmptyTarget,

    #[error("empty cloud")]
    EmptyCloud,

    #[error("invalid k: {0}")]
    InvalidK(usize),

    #[error("sample larger than cloud: requested {requested}, cloud has {available} points")]
    SampleTooLarge { requested: usize, available: usize },

    #[error("index {index} out of bounds for cloud of {len} points")]
    IndexOutOfBounds { index: usize, len: usize },

    #[error("non-finite coordinate at point {0}")]
    NonFinite(usize),

    #[error("underdetermined plane: k_normal = {0}, need at least 3")]
    UnderdeterminedPlane(usize),

    #[error("cloud too small: {what} needs {needed} points, cloud has {available}")]
    CloudTooSmall {
        what: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("invalid ratio ({0}, {1}, {2}) for {3} patches: each group needs at least one patch and the counts must sum to the patch count")]
    InvalidRatio(usize, usize, usize, usize),

    #[error("empty region: k_region must be at least 1")]
    EmptyRegion,

    #[error("region set does not match clouds: {0}")]
    RegionMismatch(String),

    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),

    #[error("empty example set")]
    EmptyExampleSet,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("over-occluded: {remaining} points would remain, need at least {minimum}")]
    OverOccluded { remaining: usize, minimum: usize },

    #[error("optimization diverged at iteration {iteration}")]
    Diverged {
        iteration: usize,
        trace: Box<RunTrace>,
    },

    #[error("{}: line {line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error("{}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
