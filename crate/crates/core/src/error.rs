use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VprError {
    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic {found:?}, expected \"VPRD\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported descriptor file version {0}")]
    UnsupportedVersion(u16),

    #[error("truncated descriptor file: header declares {expected} bytes, file has {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("non-finite value in descriptor {row} at component {col}")]
    NonFinite { row: usize, col: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("descriptor list is empty")]
    EmptyDescriptors,

    #[error("descriptor has zero dimension")]
    ZeroDim,

    #[error("descriptor {index} has zero norm")]
    ZeroNorm { index: usize },

    #[error("query descriptor has zero norm")]
    ZeroNormQuery,

    #[error("malformed image key {0:?}")]
    MalformedKey(String),

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("duplicate image key {0}")]
    DuplicateKey(String),

    #[error("place {place_id} has {count} image(s); at least 2 are required")]
    PlaceTooSmall { place_id: u32, count: usize },

    #[error("row index gap at line {line}: expected {expected}, found {found}")]
    RowGap { line: usize, expected: usize, found: usize },

    #[error("manifest has {entries} entries but descriptor file has {rows} rows")]
    RowCountMismatch { entries: usize, rows: usize },

    #[error("need at least 2 places, found {0}")]
    TooFewPlaces(usize),

    #[error("empty score set")]
    EmptyScores,

    #[error("empty component list")]
    EmptyMixture,

    #[error("place {0} missing from run record or threshold table")]
    MissingPlace(u32),

    #[error("image {0} is not a training image of its place in this split")]
    NotTrainingImage(String),

    #[error("scores carry no threshold; filtered ranking needs a threshold table")]
    MissingThresholds,

    #[error("empty database")]
    EmptyDatabase,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("threshold table line {line}: {message}")]
    ThresholdTable { line: usize, message: String },

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = VprError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> VprError {
    let path = path.into();
    move |source| VprError::Io { path, source }
}
