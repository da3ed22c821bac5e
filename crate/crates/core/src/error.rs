//! Error types shared across the crate.

use std::path::PathBuf;

/// Errors raised by tensor operations and the gradient tape.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op} expects rank {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("softmax axis {axis} out of range for shape {shape:?}")]
    AxisOutOfRange { axis: usize, shape: Vec<usize> },
    #[error("unsupported kernel size {k}; only 1 and 3 are supported")]
    KernelSize { k: usize },
    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("backward root is detached: no differentiable inputs reach it")]
    DetachedRoot,
    #[error("backward was already run on this tape")]
    TapeConsumed,
    #[error("invalid crop window [{y0}..{y1})x[{x0}..{x1}) for spatial size {h}x{w}")]
    BadCrop {
        y0: usize,
        y1: usize,
        x0: usize,
        x1: usize,
        h: usize,
        w: usize,
    },
}

/// Errors raised while loading, validating, or generating episode data.
#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("unknown affordance id {0}")]
    UnknownAffordance(u32),
    #[error("box [{x0},{y0},{x1},{y1}] invalid for {w}x{h} image{}", path_suffix(.path))]
    BadBox {
        x0: i64,
        y0: i64,
        x1: i64,
        y1: i64,
        w: usize,
        h: usize,
        path: Option<PathBuf>,
    },
    #[error("missing mask for image {0}")]
    MissingMask(PathBuf),
    #[error("unknown category id {id} in {path}")]
    UnknownCategory { id: u32, path: PathBuf },
    #[error("k-fold split needs k <= categories: k={k}, categories={n}")]
    TooManyFolds { k: usize, n: usize },
    #[error("no categories available for the requested fold role")]
    EmptyPartition,
    #[error("mask contains non-binary value {value} at pixel {index}")]
    NonBinaryMask { value: f64, index: usize },
    #[error("image size {w}x{h} must be a multiple of 32")]
    BadImageSize { w: usize, h: usize },
    #[error("malformed record {path}: {reason}")]
    MalformedRecord { path: PathBuf, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn path_suffix(path: &Option<PathBuf>) -> String {
    match path {
        Some(p) => format!(" ({})", p.display()),
        None => String::new(),
    }
}

/// Top-level error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("training diverged: loss is not finite at step {step}")]
    Diverged { step: u64 },
    #[error("checkpoint is corrupt: {0}")]
    BadCheckpoint(String),
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
