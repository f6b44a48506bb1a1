use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure modes of the NTX1 container reader.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Ntx1Error {
    #[error("bad magic {0:02x?}, expected \"NTX1\"")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    BadVersion(u16),
    #[error("dimension product overflows ({0:?})")]
    DimsOverflow(Vec<u32>),
    #[error("truncated: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("{0} trailing bytes after last section")]
    TrailingBytes(usize),
    #[error("section name is not valid UTF-8")]
    BadName,
    #[error("duplicate section {0:?}")]
    DuplicateSection(String),
    #[error("array too large to serialize: {0}")]
    TooLarge(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    ShapeMismatch {
        op: &'static str,
        left: String,
        right: String,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("generator stage for level {level}: {detail}")]
    LevelMismatch { level: usize, detail: String },
    #[error("pgm: {0}")]
    Pgm(String),
    #[error("ntx1: {0}")]
    Ntx1(#[from] Ntx1Error),
    #[error("missing section {0:?} in weight file")]
    MissingSection(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("loss node is not scalar (shape {0})")]
    NonScalarLoss(String),
    #[error("tape already consumed by a backward pass; record a new forward first")]
    StaleTape,
    #[error("gradient check failed for {term}: max relative error {error:.3e} exceeds {tolerance:.0e}")]
    GradCheck {
        term: String,
        error: f64,
        tolerance: f64,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, left: impl ToString, right: impl ToString) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_string(),
            right: right.to_string(),
        }
    }
}
