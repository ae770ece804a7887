use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("kernel {kernel} larger than padded input {padded}")]
    KernelTooLarge { kernel: usize, padded: usize },
    #[error("pooling window {window} exceeds input extent {extent}")]
    WindowTooLarge { window: usize, extent: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("numerical instability in layer {layer}: |denominator| = {value:e} below 1e-12 under the zero rule")]
    NumericalInstability { layer: usize, value: f64 },
    #[error("targets are not one-hot (row {row})")]
    NotOneHot { row: usize },
    #[error("spike tensor contains non-binary value {0}")]
    NonBinarySpikes(f64),
    #[error("tape does not match network: {0}")]
    TapeMismatch(String),
    #[error("batch-norm variance must be positive, got {0}")]
    NonPositiveVariance(f64),
    #[error("cannot canonize: {0}")]
    Canonize(String),
    #[error("relevance ranking requires a dataset")]
    MissingDataset,
    #[error("dataset files not found under {}", .0.display())]
    DatasetNotFound(PathBuf),
    #[error("IDX file has wrong magic {found:#010x} (expected {expected:#010x})")]
    WrongMagic { found: u32, expected: u32 },
    #[error("IDX file truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("IDX image count {images} does not match label count {labels}")]
    DimMismatch { images: usize, labels: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
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
