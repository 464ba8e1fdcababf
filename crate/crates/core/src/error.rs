use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("non-finite value produced by `{0}`")]
    NonFinite(&'static str),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss does not depend on any tensor that requires a gradient")]
    DetachedLoss,
    #[error("variable belongs to a different tape")]
    ForeignVar,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("bin count {0} does not evenly divide 256")]
    InvalidBinCount(usize),
    #[error("distribution is not normalized (mass {0})")]
    NotNormalized(f64),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("insufficient tissue: {0} pixels above the optical density threshold")]
    InsufficientTissue(usize),
    #[error("stain vectors are nearly parallel ({0:.3} degrees apart)")]
    ParallelStains(f64),
    #[error("image {width}x{height} is smaller than the required {min}x{min}")]
    ImageTooSmall { width: usize, height: usize, min: usize },
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("every window was degenerate")]
    AllWindowsDegenerate,
    #[error("tile size {tile} exceeds image extent {extent}")]
    TileLargerThanImage { tile: usize, extent: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {term} is not finite")]
    Diverged { step: usize, term: &'static str },
    #[error("{path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn at(self, path: impl Into<PathBuf>) -> Self {
        Error::Path {
            path: path.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
