use std::path::PathBuf;

use crate::engine::fault::CrashPoint;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported {format} version {version}")]
    UnsupportedVersion { format: &'static str, version: u16 },

    #[error("truncated {what}: needed {needed} bytes, {available} available")]
    Truncated {
        what: &'static str,
        needed: u64,
        available: u64,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),

    #[error("shape mismatch for `{name}`: base {base:?}, target {target:?}")]
    ShapeMismatch {
        name: String,
        base: Vec<u64>,
        target: Vec<u64>,
    },

    #[error("dtype mismatch for `{name}`: expected {expected}, found {found}")]
    DtypeMismatch {
        name: String,
        expected: &'static str,
        found: &'static str,
    },

    #[error("name mismatch: base `{base}`, target `{target}`")]
    NameMismatch { base: String, target: String },

    #[error("inconsistent delta record `{name}`: {reason}")]
    DeltaInconsistent { name: String, reason: String },

    #[error("changed count {changed} exceeds total {total}")]
    ChangedExceedsTotal { total: u64, changed: u64 },

    #[error("cluster count {0} outside 2..=16")]
    ClusterCount(usize),

    #[error("cannot quantize empty tensor `{0}`")]
    EmptyTensor(String),

    #[error("non-finite value in `{name}` at element {index}")]
    NonFinite { name: String, index: usize },

    #[error("label {label} out of range for {clusters} clusters")]
    LabelOverflow { label: u8, clusters: usize },

    #[error("table/tensor mismatch: {0}")]
    TableMismatch(String),

    #[error("structure mismatch: {0}")]
    StructureMismatch(String),

    #[error("delta checkpoint at iteration {iteration} requires the previous checkpoint {parent}")]
    MissingPrev { iteration: u64, parent: u64 },

    #[error("previous checkpoint is iteration {given}, store expects {expected}")]
    PrevMismatch { given: u64, expected: u64 },

    #[error("iteration {iteration} is not newer than {newest}")]
    StaleIteration { iteration: u64, newest: u64 },

    #[error("missing link: iteration {missing} (needed to reconstruct {needed_by})")]
    MissingLink { missing: u64, needed_by: u64 },

    #[error("iteration {0} not found")]
    NotFound(u64),

    #[error("corrupt manifest at iteration {iteration}: {reason}")]
    CorruptManifest { iteration: u64, reason: String },

    #[error("tracker parse failure in {path}: {reason}")]
    TrackerParse { path: PathBuf, reason: String },

    #[error("tracker file absent: {0}")]
    TrackerMissing(PathBuf),

    #[error("type.txt at iteration {iteration} says `{found}`, manifest says `{expected}`")]
    TypeMismatch {
        iteration: u64,
        expected: String,
        found: String,
    },

    #[error("tracker disagreement: {0}")]
    TrackerMismatch(String),

    #[error("store {0} is locked by another writer")]
    Locked(PathBuf),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("rank {rank}: every slot is awaiting persistence")]
    Backpressure { rank: u32 },

    #[error("payload of {len} bytes exceeds slot capacity {capacity}")]
    PayloadTooLarge { len: u64, capacity: u64 },

    #[error("slot region: {0}")]
    SlotRegion(String),

    #[error("rank {0} out of range")]
    RankOutOfRange(u32),

    #[error("injected crash at {0:?}")]
    InjectedCrash(CrashPoint),

    #[error("no iteration is valid on every rank; cold start required")]
    ColdStart,

    #[error("invalid quality weights: {0}")]
    Weights(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn is_injected_crash(&self) -> bool {
        matches!(self, Error::InjectedCrash(_))
    }
}

/// Attaches a path to `std::io::Result`s.
pub(crate) trait IoContext<T> {
    fn at(self, path: &std::path::Path) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: &std::path::Path) -> Result<T> {
        self.map_err(|e| Error::io(path, e))
    }
}
