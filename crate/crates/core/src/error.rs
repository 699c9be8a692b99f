use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure classes, used by the command-line front end to pick an
/// exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Malformed or inconsistent input data and files.
    Data,
    /// A numerical precondition failed (degenerate geometry, non-finite values).
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    // structured latents
    #[error("structured latent needs at least one voxel")]
    EmptyLatent,
    #[error("voxel {index}: position {position:?} appears more than once")]
    DuplicatePosition { index: usize, position: [u32; 3] },
    #[error("voxel {index}: position {position:?} outside a grid of resolution {resolution}")]
    OutOfBounds {
        index: usize,
        position: [u32; 3],
        resolution: u32,
    },
    #[error("voxel {index}: latent has {found} channels, expected {expected}")]
    ChannelMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("voxel {index}: latent contains a non-finite value")]
    NonFinite { index: usize },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    // partitioning
    #[error("k = {k} exceeds the number of points ({points})")]
    KTooLarge { k: usize, points: usize },
    #[error("feature dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("row {row} has zero norm")]
    ZeroNormRow { row: usize },
    #[error("appearance shape has no voxels")]
    EmptyAppearance,
    #[error("feature field has {features} rows but the shape has {voxels} voxels")]
    FeatureRowMismatch { features: usize, voxels: usize },

    // guidance and optimization
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("voxel {0} has no positive partner in its cluster")]
    EmptyPositiveSet(usize),
    #[error("voxel {0} has an empty complement set")]
    EmptyComplement(usize),
    #[error("appearance guidance requires a target matrix")]
    MissingTarget,
    #[error("structure guidance requires cluster labels")]
    MissingLabels,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    // flows
    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("bad condition: {0}")]
    BadCondition(String),
    #[error("non-finite values produced at step {step}")]
    Diverged { step: usize },

    // files
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {0}")]
    BadVersion(u32),
    #[error("file truncated at byte offset {0}")]
    TruncatedFile(u64),
    #[error("{0} trailing bytes after the last record")]
    TrailingData(u64),
    #[error("record {0} is not in canonical order")]
    UnsortedPositions(usize),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("digest mismatch for {what}: file has {expected}, provided {actual}")]
    DigestMismatch {
        what: String,
        expected: String,
        actual: String,
    },
    #[error("failed to write {path}: {source}")]
    WriteFailure {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("failed to read {path}: {source}")]
    ReadFailure {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),

    // ranking records
    #[error("line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("line {line}: ranks are not a permutation of 1..={methods}")]
    NotAPermutation { line: usize, methods: usize },
    #[error("no records for criterion {0}")]
    NoRecords(String),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::ZeroNormRow { .. }
            | Error::NonFinite { .. }
            | Error::Diverged { .. }
            | Error::EmptyPositiveSet(_)
            | Error::EmptyComplement(_) => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }
}
