use std::io;

use thiserror::Error;

/// Errors raised by the FMAP / label-grid readers and writers.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic {found:?}, expected \"FMAP\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported FMAP version {0}")]
    UnsupportedVersion(u16),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("dimension {axis}={value} out of range (1..={max})")]
    Dimension {
        axis: &'static str,
        value: u64,
        max: u64,
    },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("trailing bytes after payload")]
    TrailingBytes,
    #[error("non-finite component at index {0}")]
    NonFinite(usize),
    #[error("label grid: {0}")]
    LabelGrid(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Errors from the numerical pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("non-finite vector component")]
    NonFinite,
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("lattice mismatch: expected {expected_h}x{expected_w}, found {found_h}x{found_w}")]
    LatticeMismatch {
        expected_h: usize,
        expected_w: usize,
        found_h: usize,
        found_w: usize,
    },
    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("frame mismatch: expected {expected:?}, found {found:?}")]
    FrameMismatch {
        expected: crate::tensor::Frame,
        found: crate::tensor::Frame,
    },
    #[error("window does not fit the representation lattice: {0}")]
    MisalignedWindow(String),
    #[error("proposal {proposal_h}x{proposal_w} larger than lattice {lattice_h}x{lattice_w}")]
    ProposalTooLarge {
        proposal_h: usize,
        proposal_w: usize,
        lattice_h: usize,
        lattice_w: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("infeasible generation: {0}")]
    Infeasible(String),
    #[error("training diverged at epoch {epoch}: total loss {loss} vs initial {initial}")]
    Diverged { epoch: usize, loss: f64, initial: f64 },
    #[error("unexpected occluded label in training data (image {0})")]
    OccludedInTraining(usize),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
