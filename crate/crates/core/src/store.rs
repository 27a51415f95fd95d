//! On-disk base/delta checkpoint chains.
//!
//! ```text
//! <root>/latest_checkpointed_iteration.txt   tracker: latest iteration, latest base iteration
//! <root>/iter_0000100/type.txt               "base" or "delta"
//! <root>/iter_0000100/manifest.bin           BSMF manifest
//! <root>/iter_0000100/tensors.bin            concatenated BSNP / BSDL / BSQT blobs
//! ```
//!
//! A checkpoint directory is written under a temporary name and renamed into
//! place; the tracker is then replaced via temp-file-and-rename. The tracker
//! rename is the commit point: directories newer than the tracker are orphans.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::bitmask::{self, DeltaRecord};
use crate::engine::fault::{CrashPoint, FaultInjector};
use crate::error::{Error, IoContext, Result};
use crate::quant::{self, QuantizedTensor, DEFAULT_CLUSTERS};
use crate::tensor::{Checkpoint, TensorBlob};
use crate::wire::{self, Reader};

pub const TRACKER_FILE: &str = "latest_checkpointed_iteration.txt";
pub const TYPE_FILE: &str = "type.txt";
pub const MANIFEST_FILE: &str = "manifest.bin";
pub const TENSORS_FILE: &str = "tensors.bin";
pub const LOCK_FILE: &str = ".lock";
const TRACKER_TEMP: &str = ".latest_checkpointed_iteration.txt.tmp";
const TEMP_DIR_PREFIX: &str = ".tmp_";

/// Overrides [`StoreConfig::max_cached_iteration`] when set.
pub const ENV_MAX_CACHED_ITERATION: &str = "MAX_CACHED_ITERATION";

pub const MANIFEST_MAGIC: &[u8; 4] = b"BSMF";
pub const MANIFEST_VERSION: u16 = 1;
pub const ENCODED_MAGIC: &[u8; 4] = b"BSEC";
pub const ENCODED_VERSION: u16 = 1;

pub fn iteration_dir_name(iteration: u64) -> String {
    format!("iter_{iteration:07}")
}

pub fn parse_iteration_dir(name: &str) -> Option<u64> {
    let digits = name.strip_prefix("iter_")?;
    if digits.len() < 7 || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

pub fn digest(bytes: &[u8]) -> u64 {
    xxhash_rust::xxh3::xxh3_64(bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Base,
    Delta,
}

impl CheckpointKind {
    pub fn token(self) -> &'static str {
        match self {
            CheckpointKind::Base => "base",
            CheckpointKind::Delta => "delta",
        }
    }

    fn tag(self) -> u8 {
        match self {
            CheckpointKind::Base => 0,
            CheckpointKind::Delta => 1,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(CheckpointKind::Base),
            1 => Some(CheckpointKind::Delta),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Codec {
    Raw,
    Delta,
    Quant,
}

impl Codec {
    fn tag(self) -> u8 {
        match self {
            Codec::Raw => 0,
            Codec::Delta => 1,
            Codec::Quant => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Codec::Raw),
            1 => Some(Codec::Delta),
            2 => Some(Codec::Quant),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Section {
    Model,
    Optimizer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TensorEntry {
    pub name: String,
    pub section: Section,
    pub codec: Codec,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CheckpointManifest {
    pub iteration: u64,
    pub kind: CheckpointKind,
    /// Root of the chain; equals `iteration` for a base.
    pub base_iteration: u64,
    /// Checkpoint the model-state deltas were computed against.
    pub parent_iteration: Option<u64>,
    /// xxh3-64 of tensors.bin.
    pub tensors_digest: u64,
    pub entries: Vec<TensorEntry>,
}

impl CheckpointManifest {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| {
            Err(Error::CorruptManifest {
                iteration: self.iteration,
                reason,
            })
        };
        match (self.kind, self.parent_iteration) {
            (CheckpointKind::Base, None) if self.base_iteration == self.iteration => {}
            (CheckpointKind::Base, _) => return bad("base must be its own root".into()),
            (CheckpointKind::Delta, Some(p)) if self.base_iteration <= p && p < self.iteration => {}
            (CheckpointKind::Delta, _) => {
                return bad(format!(
                    "delta needs base <= parent < iteration (base {}, parent {:?})",
                    self.base_iteration, self.parent_iteration
                ))
            }
        }
        let mut end = 0u64;
        let mut seen_optimizer = false;
        for e in &self.entries {
            let ok = match (e.section, e.codec) {
                (Section::Model, Codec::Raw) => !seen_optimizer,
                (Section::Model, Codec::Delta) => {
                    !seen_optimizer && self.kind == CheckpointKind::Delta
                }
                (Section::Model, Codec::Quant) => false,
                (Section::Optimizer, Codec::Quant | Codec::Raw) => true,
                (Section::Optimizer, Codec::Delta) => false,
            };
            if !ok {
                return bad(format!(
                    "`{}` has codec {:?} in {:?}",
                    e.name, e.codec, e.section
                ));
            }
            seen_optimizer |= e.section == Section::Optimizer;
            if e.offset != end {
                return bad(format!("`{}` is not contiguous", e.name));
            }
            end = e.offset + e.length;
        }
        Ok(())
    }

    pub fn tensors_len(&self) -> u64 {
        self.entries.last().map_or(0, |e| e.offset + e.length)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MANIFEST_MAGIC);
        wire::put_u16(&mut out, MANIFEST_VERSION);
        wire::put_u64(&mut out, self.iteration);
        wire::put_u8(&mut out, self.kind.tag());
        wire::put_u64(&mut out, self.base_iteration);
        wire::put_u8(&mut out, self.parent_iteration.is_some() as u8);
        wire::put_u64(&mut out, self.parent_iteration.unwrap_or(0));
        wire::put_u64(&mut out, self.tensors_digest);
        wire::put_u32(&mut out, self.entries.len() as u32);
        for e in &self.entries {
            wire::put_u8(&mut out, (e.section == Section::Optimizer) as u8);
            wire::put_u8(&mut out, e.codec.tag());
            wire::put_name(&mut out, &e.name);
            wire::put_u64(&mut out, e.offset);
            wire::put_u64(&mut out, e.length);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "manifest");
        r.magic(MANIFEST_MAGIC)?;
        r.version("BSMF manifest", MANIFEST_VERSION)?;
        let iteration = r.u64()?;
        let corrupt = |reason: &str| Error::CorruptManifest {
            iteration,
            reason: reason.into(),
        };
        let kind = CheckpointKind::from_tag(r.u8()?).ok_or_else(|| corrupt("bad kind tag"))?;
        let base_iteration = r.u64()?;
        let has_parent = r.u8()?;
        let parent = r.u64()?;
        let parent_iteration = match has_parent {
            0 => None,
            1 => Some(parent),
            _ => return Err(corrupt("bad parent flag")),
        };
        let tensors_digest = r.u64()?;
        let count = r.u32()?;
        let mut entries = Vec::with_capacity(count.min(1 << 16) as usize);
        for _ in 0..count {
            let section = match r.u8()? {
                0 => Section::Model,
                1 => Section::Optimizer,
                _ => return Err(corrupt("bad section tag")),
            };
            let codec = Codec::from_tag(r.u8()?).ok_or_else(|| corrupt("bad codec tag"))?;
            let name = r.name()?;
            let offset = r.u64()?;
            let length = r.u64()?;
            entries.push(TensorEntry {
                name,
                section,
                codec,
                offset,
                length,
            });
        }
        if r.remaining() != 0 {
            return Err(corrupt("trailing bytes"));
        }
        let m = CheckpointManifest {
            iteration,
            kind,
            base_iteration,
            parent_iteration,
            tensors_digest,
            entries,
        };
        m.validate()?;
        Ok(m)
    }
}

/// A compressed checkpoint: what goes into an iteration directory, and the
/// payload staged into shared memory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedCheckpoint {
    pub manifest: CheckpointManifest,
    pub tensors: Vec<u8>,
}

impl EncodedCheckpoint {
    pub fn iteration(&self) -> u64 {
        self.manifest.iteration
    }

    fn check(&self) -> Result<()> {
        self.manifest.validate()?;
        if self.manifest.tensors_len() != self.tensors.len() as u64 {
            return Err(Error::CorruptManifest {
                iteration: self.manifest.iteration,
                reason: format!(
                    "entries span {} bytes, tensors.bin has {}",
                    self.manifest.tensors_len(),
                    self.tensors.len()
                ),
            });
        }
        if digest(&self.tensors) != self.manifest.tensors_digest {
            return Err(Error::CorruptManifest {
                iteration: self.manifest.iteration,
                reason: "tensors.bin digest mismatch".into(),
            });
        }
        Ok(())
    }

    /// `BSEC` | version u16 | manifest length u64 | manifest | tensors length u64 | tensors
    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = self.manifest.to_bytes();
        let mut out = Vec::with_capacity(4 + 2 + 16 + manifest.len() + self.tensors.len());
        out.extend_from_slice(ENCODED_MAGIC);
        wire::put_u16(&mut out, ENCODED_VERSION);
        wire::put_u64(&mut out, manifest.len() as u64);
        out.extend_from_slice(&manifest);
        wire::put_u64(&mut out, self.tensors.len() as u64);
        out.extend_from_slice(&self.tensors);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let manifest = Self::peek_manifest(bytes)?;
        let mut r = Reader::new(bytes, "encoded checkpoint");
        r.take(4 + 2)?;
        let mlen = r.u64()?;
        r.take_u64(mlen)?;
        let tlen = r.u64()?;
        let tensors = r.take_u64(tlen)?.to_vec();
        let enc = EncodedCheckpoint { manifest, tensors };
        enc.check()?;
        Ok(enc)
    }

    /// Parses only the manifest of a staged payload.
    pub fn peek_manifest(bytes: &[u8]) -> Result<CheckpointManifest> {
        let mut r = Reader::new(bytes, "encoded checkpoint");
        r.magic(ENCODED_MAGIC)?;
        r.version("BSEC encoded checkpoint", ENCODED_VERSION)?;
        let mlen = r.u64()?;
        CheckpointManifest::from_bytes(r.take_u64(mlen)?)
    }

    fn blob(&self, e: &TensorEntry) -> &[u8] {
        &self.tensors[e.offset as usize..(e.offset + e.length) as usize]
    }

    fn model_entries(&self) -> impl Iterator<Item = &TensorEntry> {
        self.manifest
            .entries
            .iter()
            .filter(|e| e.section == Section::Model)
    }

    /// Brings `model` (the parent's model states) up to this checkpoint.
    /// For a base, `model` is replaced.
    pub fn apply_model(&self, model: &mut Vec<TensorBlob>) -> Result<()> {
        let entries: Vec<&TensorEntry> = self.model_entries().collect();
        if self.manifest.kind == CheckpointKind::Base {
            *model = entries
                .iter()
                .map(|e| TensorBlob::from_bytes(self.blob(e)))
                .collect::<Result<_>>()?;
            return Ok(());
        }
        if entries.len() != model.len() {
            return Err(Error::StructureMismatch(format!(
                "iteration {} has {} model tensors, parent has {}",
                self.manifest.iteration,
                entries.len(),
                model.len()
            )));
        }
        for (e, t) in entries.iter().zip(model.iter_mut()) {
            if e.name != t.name() {
                return Err(Error::NameMismatch {
                    base: t.name().into(),
                    target: e.name.clone(),
                });
            }
            match e.codec {
                Codec::Raw => *t = TensorBlob::from_bytes(self.blob(e))?,
                Codec::Delta => {
                    bitmask::apply_delta_in_place(t, &DeltaRecord::from_bytes(self.blob(e))?)?
                }
                Codec::Quant => unreachable!("validated manifest"),
            }
        }
        Ok(())
    }

    pub fn decode_optimizer(&self) -> Result<Vec<TensorBlob>> {
        self.manifest
            .entries
            .iter()
            .filter(|e| e.section == Section::Optimizer)
            .map(|e| match e.codec {
                Codec::Quant => quant::dequantize(&QuantizedTensor::from_bytes(self.blob(e))?),
                _ => TensorBlob::from_bytes(self.blob(e)),
            })
            .collect()
    }

    pub fn model_bytes(&self) -> u64 {
        self.model_entries().map(|e| e.length).sum()
    }

    pub fn optimizer_bytes(&self) -> u64 {
        self.manifest.tensors_len() - self.model_bytes()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChainHead {
    pub latest: u64,
    pub base: u64,
    /// Checkpoints from the base to `latest`, inclusive.
    pub length: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KindPlan {
    pub kind: CheckpointKind,
    pub base_iteration: u64,
    pub parent_iteration: Option<u64>,
}

/// A new base starts once the current chain holds `max_cached` checkpoints.
pub fn plan_kind(iteration: u64, head: Option<ChainHead>, max_cached: usize) -> KindPlan {
    match head {
        Some(h) if h.length < max_cached => KindPlan {
            kind: CheckpointKind::Delta,
            base_iteration: h.base,
            parent_iteration: Some(h.latest),
        },
        _ => KindPlan {
            kind: CheckpointKind::Base,
            base_iteration: iteration,
            parent_iteration: None,
        },
    }
}

/// Compresses `ckpt`: model states raw (base) or as deltas against `prev`,
/// optimizer states always quantized with `clusters` clusters.
pub fn encode_checkpoint(
    ckpt: &Checkpoint,
    prev: Option<&Checkpoint>,
    plan: &KindPlan,
    clusters: usize,
) -> Result<EncodedCheckpoint> {
    ckpt.validate()?;
    let mut tensors = Vec::new();
    let mut entries = Vec::new();
    let mut push = |name: &str, section, codec, bytes: Vec<u8>| {
        entries.push(TensorEntry {
            name: name.to_string(),
            section,
            codec,
            offset: tensors.len() as u64,
            length: bytes.len() as u64,
        });
        tensors.extend_from_slice(&bytes);
    };

    match (plan.kind, plan.parent_iteration) {
        (CheckpointKind::Base, _) => {
            for t in &ckpt.model_states {
                push(t.name(), Section::Model, Codec::Raw, t.to_bytes());
            }
        }
        (CheckpointKind::Delta, parent) => {
            let parent = parent.expect("delta plan has a parent");
            let prev = prev.ok_or(Error::MissingPrev {
                iteration: ckpt.iteration,
                parent,
            })?;
            if prev.iteration != parent {
                return Err(Error::PrevMismatch {
                    given: prev.iteration,
                    expected: parent,
                });
            }
            prev.check_same_structure(ckpt)?;
            for (p, t) in prev.model_states.iter().zip(&ckpt.model_states) {
                let rec = bitmask::encode_delta(p, t)?;
                if bitmask::exceeds_benefit_threshold(rec.total(), rec.changed()) {
                    push(t.name(), Section::Model, Codec::Raw, t.to_bytes());
                } else {
                    push(t.name(), Section::Model, Codec::Delta, rec.to_bytes());
                }
            }
        }
    }

    for t in &ckpt.optimizer_states {
        match quant::compress(t, clusters) {
            Ok(q) => push(t.name(), Section::Optimizer, Codec::Quant, q.to_bytes()),
            Err(Error::EmptyTensor(_)) => {
                push(t.name(), Section::Optimizer, Codec::Raw, t.to_bytes())
            }
            Err(Error::NonFinite { name, index }) => {
                log::warn!("`{name}` has a non-finite value at {index}; storing raw");
                push(t.name(), Section::Optimizer, Codec::Raw, t.to_bytes())
            }
            Err(e) => return Err(e),
        }
    }

    let manifest = CheckpointManifest {
        iteration: ckpt.iteration,
        kind: plan.kind,
        base_iteration: plan.base_iteration,
        parent_iteration: plan.parent_iteration,
        tensors_digest: digest(&tensors),
        entries,
    };
    manifest.validate()?;
    Ok(EncodedCheckpoint { manifest, tensors })
}

/// Walks parent links from `target` back to its base. `fetch` returns `None`
/// for an iteration that is not available.
pub fn resolve_chain<F>(target: u64, mut fetch: F) -> Result<Vec<EncodedCheckpoint>>
where
    F: FnMut(u64) -> Result<Option<EncodedCheckpoint>>,
{
    let mut chain = Vec::new();
    let mut next = Some(target);
    while let Some(it) = next {
        let enc = match fetch(it)? {
            Some(enc) => enc,
            None if it == target => return Err(Error::NotFound(target)),
            None => {
                return Err(Error::MissingLink {
                    missing: it,
                    needed_by: target,
                })
            }
        };
        if enc.iteration() != it {
            return Err(Error::CorruptManifest {
                iteration: it,
                reason: format!("manifest names iteration {}", enc.iteration()),
            });
        }
        next = enc.manifest.parent_iteration;
        chain.push(enc);
    }
    chain.reverse();
    Ok(chain)
}

/// Decodes a base-first chain into the last checkpoint.
pub fn reconstruct(chain: &[EncodedCheckpoint]) -> Result<Checkpoint> {
    let last = chain
        .last()
        .ok_or_else(|| Error::InvalidCheckpoint("empty chain".into()))?;
    if chain[0].manifest.kind != CheckpointKind::Base {
        return Err(Error::MissingLink {
            missing: chain[0].manifest.base_iteration,
            needed_by: last.iteration(),
        });
    }
    let mut model = Vec::new();
    for enc in chain {
        enc.apply_model(&mut model)?;
    }
    Checkpoint::new(last.iteration(), model, last.decode_optimizer()?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreConfig {
    pub root: PathBuf,
    /// Checkpoints per chain, base included.
    pub max_cached_iteration: usize,
    /// In-memory redundancy depth K.
    pub redundancy: usize,
    pub clusters: usize,
}

impl StoreConfig {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        StoreConfig {
            root: root.into(),
            max_cached_iteration: 5,
            redundancy: 2,
            clusters: DEFAULT_CLUSTERS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_cached_iteration < 1 {
            return Err(Error::Config("max_cached_iteration must be >= 1".into()));
        }
        if self.redundancy < 1 {
            return Err(Error::Config("redundancy must be >= 1".into()));
        }
        if !(quant::MIN_CLUSTERS..=quant::MAX_CLUSTERS).contains(&self.clusters) {
            return Err(Error::ClusterCount(self.clusters));
        }
        Ok(())
    }

    /// Applies `MAX_CACHED_ITERATION` from the environment if present.
    pub fn with_env_override(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(ENV_MAX_CACHED_ITERATION) {
            self.max_cached_iteration = v.trim().parse().map_err(|_| {
                Error::Config(format!("{ENV_MAX_CACHED_ITERATION}={v:?} is not a count"))
            })?;
        }
        self.validate()?;
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TrackerState {
    pub latest_iteration: u64,
    pub latest_base_iteration: u64,
}

fn fsync_dir(dir: &Path) -> Result<()> {
    File::open(dir).and_then(|f| f.sync_all()).at(dir)
}

fn write_synced(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = File::create(path).at(path)?;
    f.write_all(bytes).at(path)?;
    f.sync_all().at(path)
}

pub fn tracker_path(root: &Path) -> PathBuf {
    root.join(TRACKER_FILE)
}

pub fn read_tracker(root: &Path) -> Result<TrackerState> {
    let path = tracker_path(root);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::TrackerMissing(path))
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    let parse_err = |reason: String| Error::TrackerParse {
        path: path.clone(),
        reason,
    };
    let lines: Vec<&str> = text.lines().collect();
    if lines.len() != 2 {
        return Err(parse_err(format!(
            "expected 2 lines, found {}",
            lines.len()
        )));
    }
    let num = |s: &str| {
        s.trim()
            .parse::<u64>()
            .map_err(|_| parse_err(format!("`{s}` is not an iteration")))
    };
    let state = TrackerState {
        latest_iteration: num(lines[0])?,
        latest_base_iteration: num(lines[1])?,
    };
    if state.latest_base_iteration > state.latest_iteration {
        return Err(parse_err("base is newer than latest".into()));
    }
    Ok(state)
}

fn read_tracker_opt(root: &Path) -> Result<Option<TrackerState>> {
    match read_tracker(root) {
        Ok(t) => Ok(Some(t)),
        Err(Error::TrackerMissing(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Replaces the tracker through a temporary file and rename.
pub fn write_tracker(root: &Path, state: TrackerState, faults: &FaultInjector) -> Result<()> {
    let tmp = root.join(TRACKER_TEMP);
    write_synced(
        &tmp,
        format!(
            "{}\n{}\n",
            state.latest_iteration, state.latest_base_iteration
        )
        .as_bytes(),
    )?;
    faults.check(CrashPoint::TrackerAfterTempWrite)?;
    let path = tracker_path(root);
    fs::rename(&tmp, &path).at(&path)?;
    fsync_dir(root)?;
    faults.check(CrashPoint::TrackerAfterRename)
}

/// Held while a writer mutates the store.
#[derive(Debug)]
pub struct StoreLock {
    _file: File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommitOutcome {
    Committed,
    /// The iteration was already committed; nothing written.
    AlreadyPresent,
}

#[derive(Debug, Clone, Serialize)]
pub struct StoreSummary {
    pub root: PathBuf,
    pub tracker: Option<TrackerState>,
    pub checkpoints: Vec<CheckpointManifest>,
    pub orphans: Vec<String>,
}

#[derive(Debug)]
pub struct CheckpointStore {
    cfg: StoreConfig,
    faults: FaultInjector,
    force_base: bool,
}

impl CheckpointStore {
    pub fn open(cfg: StoreConfig) -> Result<Self> {
        Self::open_with_faults(cfg, FaultInjector::new())
    }

    pub fn open_with_faults(cfg: StoreConfig, faults: FaultInjector) -> Result<Self> {
        cfg.validate()?;
        fs::create_dir_all(&cfg.root).at(&cfg.root)?;
        Ok(CheckpointStore {
            cfg,
            faults,
            force_base: false,
        })
    }

    pub fn config(&self) -> &StoreConfig {
        &self.cfg
    }

    pub fn root(&self) -> &Path {
        &self.cfg.root
    }

    pub fn iteration_dir(&self, iteration: u64) -> PathBuf {
        self.cfg.root.join(iteration_dir_name(iteration))
    }

    pub fn lock(&self) -> Result<StoreLock> {
        let path = self.cfg.root.join(LOCK_FILE);
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .at(&path)?;
        match file.try_lock() {
            Ok(()) => Ok(StoreLock { _file: file }),
            Err(fs::TryLockError::WouldBlock) => Err(Error::Locked(self.cfg.root.clone())),
            Err(fs::TryLockError::Error(e)) => Err(Error::io(path, e)),
        }
    }

    pub fn read_tracker(&self) -> Result<TrackerState> {
        read_tracker(&self.cfg.root)
    }

    pub fn write_tracker(&self, state: TrackerState) -> Result<()> {
        write_tracker(&self.cfg.root, state, &self.faults)
    }

    pub fn read_manifest(&self, iteration: u64) -> Result<Option<CheckpointManifest>> {
        let path = self.iteration_dir(iteration).join(MANIFEST_FILE);
        match fs::read(&path) {
            Ok(b) => CheckpointManifest::from_bytes(&b)
                .map(Some)
                .map_err(|e| match e {
                    Error::CorruptManifest { .. } => e,
                    other => Error::CorruptManifest {
                        iteration,
                        reason: other.to_string(),
                    },
                }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    /// Reads and verifies one iteration directory. `None` if it does not exist.
    pub fn read_encoded(&self, iteration: u64) -> Result<Option<EncodedCheckpoint>> {
        let dir = self.iteration_dir(iteration);
        let Some(manifest) = self.read_manifest(iteration)? else {
            return Ok(None);
        };
        if manifest.iteration != iteration {
            return Err(Error::CorruptManifest {
                iteration,
                reason: format!("manifest names iteration {}", manifest.iteration),
            });
        }
        let type_path = dir.join(TYPE_FILE);
        let token = fs::read_to_string(&type_path).at(&type_path)?;
        if token != format!("{}\n", manifest.kind.token()) {
            return Err(Error::TypeMismatch {
                iteration,
                expected: manifest.kind.token().into(),
                found: token.trim_end().into(),
            });
        }
        let tensors_path = dir.join(TENSORS_FILE);
        let tensors = fs::read(&tensors_path).at(&tensors_path)?;
        let enc = EncodedCheckpoint { manifest, tensors };
        enc.check()?;
        Ok(Some(enc))
    }

    fn chain_head(&self, tracker: &TrackerState) -> Result<ChainHead> {
        let mut length = 0usize;
        let mut it = tracker.latest_iteration;
        loop {
            let m = self.read_manifest(it)?.ok_or(Error::MissingLink {
                missing: it,
                needed_by: tracker.latest_iteration,
            })?;
            length += 1;
            match m.parent_iteration {
                Some(p) => it = p,
                None => break,
            }
        }
        Ok(ChainHead {
            latest: tracker.latest_iteration,
            base: tracker.latest_base_iteration,
            length,
        })
    }

    /// Kind, base and parent the next save at `iteration` would use.
    pub fn plan(&self, iteration: u64) -> Result<KindPlan> {
        if self.force_base {
            return Ok(plan_kind(iteration, None, self.cfg.max_cached_iteration));
        }
        let head = match read_tracker_opt(&self.cfg.root)? {
            Some(t) => Some(self.chain_head(&t)?),
            None => None,
        };
        Ok(plan_kind(iteration, head, self.cfg.max_cached_iteration))
    }

    /// Compresses and commits `ckpt`. `prev` must be the reconstructed latest
    /// checkpoint whenever the plan calls for a delta.
    pub fn save_checkpoint(
        &mut self,
        ckpt: &Checkpoint,
        prev: Option<&Checkpoint>,
    ) -> Result<CheckpointManifest> {
        let _lock = self.lock()?;
        if let Some(t) = read_tracker_opt(&self.cfg.root)? {
            if ckpt.iteration <= t.latest_iteration {
                return Err(Error::StaleIteration {
                    iteration: ckpt.iteration,
                    newest: t.latest_iteration,
                });
            }
        }
        let plan = self.plan(ckpt.iteration)?;
        let enc = encode_checkpoint(ckpt, prev, &plan, self.cfg.clusters)?;
        self.commit_locked(&enc)?;
        Ok(enc.manifest)
    }

    pub fn commit(&mut self, enc: &EncodedCheckpoint) -> Result<CommitOutcome> {
        let _lock = self.lock()?;
        self.commit_locked(enc)
    }

    fn commit_locked(&mut self, enc: &EncodedCheckpoint) -> Result<CommitOutcome> {
        enc.check()?;
        let m = &enc.manifest;
        let tracker = read_tracker_opt(&self.cfg.root)?;
        if let Some(t) = tracker {
            if m.iteration <= t.latest_iteration {
                if self.iteration_dir(m.iteration).is_dir() {
                    return Ok(CommitOutcome::AlreadyPresent);
                }
                return Err(Error::StaleIteration {
                    iteration: m.iteration,
                    newest: t.latest_iteration,
                });
            }
        }
        if let Some(parent) = m.parent_iteration {
            let linked = tracker.is_some_and(|t| {
                t.latest_iteration == parent && t.latest_base_iteration == m.base_iteration
            });
            if !linked {
                return Err(Error::MissingLink {
                    missing: parent,
                    needed_by: m.iteration,
                });
            }
        }

        let tmp = self.cfg.root.join(format!(
            "{TEMP_DIR_PREFIX}{}",
            iteration_dir_name(m.iteration)
        ));
        let dst = self.iteration_dir(m.iteration);
        match self.write_dir(enc, &tmp, &dst) {
            Ok(()) => {
                self.force_base = false;
                Ok(CommitOutcome::Committed)
            }
            Err(e) if e.is_injected_crash() => Err(e),
            Err(e) => {
                let _ = fs::remove_dir_all(&tmp);
                if read_tracker_opt(&self.cfg.root)
                    .ok()
                    .flatten()
                    .is_none_or(|t| t.latest_iteration < m.iteration)
                {
                    let _ = fs::remove_dir_all(&dst);
                }
                self.force_base = true;
                Err(e)
            }
        }
    }

    fn write_dir(&self, enc: &EncodedCheckpoint, tmp: &Path, dst: &Path) -> Result<()> {
        let m = &enc.manifest;
        if tmp.exists() {
            fs::remove_dir_all(tmp).at(tmp)?;
        }
        fs::create_dir(tmp).at(tmp)?;
        self.faults.check(CrashPoint::PersistAfterTempDir)?;
        write_synced(&tmp.join(TENSORS_FILE), &enc.tensors)?;
        self.faults.check(CrashPoint::PersistAfterTensors)?;
        write_synced(&tmp.join(MANIFEST_FILE), &m.to_bytes())?;
        self.faults.check(CrashPoint::PersistAfterManifest)?;
        write_synced(
            &tmp.join(TYPE_FILE),
            format!("{}\n", m.kind.token()).as_bytes(),
        )?;
        self.faults.check(CrashPoint::PersistAfterTypeFile)?;
        fsync_dir(tmp)?;
        if dst.exists() {
            // Orphan from an interrupted commit.
            fs::remove_dir_all(dst).at(dst)?;
        }
        fs::rename(tmp, dst).at(dst)?;
        fsync_dir(&self.cfg.root)?;
        self.faults.check(CrashPoint::PersistAfterDirRename)?;
        self.write_tracker(TrackerState {
            latest_iteration: m.iteration,
            latest_base_iteration: m.base_iteration,
        })
    }

    /// Encoded checkpoints from the base of `target` up to `target`.
    pub fn chain(&self, target: u64) -> Result<Vec<EncodedCheckpoint>> {
        resolve_chain(target, |it| self.read_encoded(it))
    }

    /// Reconstructs `iteration`, or the tracker's latest when `None`.
    pub fn load_checkpoint(&self, iteration: Option<u64>) -> Result<Checkpoint> {
        let tracker = self.read_tracker()?;
        let target = iteration.unwrap_or(tracker.latest_iteration);
        if target > tracker.latest_iteration {
            return Err(Error::NotFound(target));
        }
        let chain = self.chain(target)?;
        if target == tracker.latest_iteration
            && chain[0].iteration() != tracker.latest_base_iteration
        {
            return Err(Error::TrackerMismatch(format!(
                "tracker names base {} for iteration {target}, chain starts at {}",
                tracker.latest_base_iteration,
                chain[0].iteration()
            )));
        }
        reconstruct(&chain)
    }

    fn scan(&self) -> Result<(Vec<u64>, Vec<String>)> {
        let mut iters = Vec::new();
        let mut temps = Vec::new();
        for entry in fs::read_dir(&self.cfg.root).at(&self.cfg.root)? {
            let entry = entry.at(&self.cfg.root)?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(it) = parse_iteration_dir(&name) {
                iters.push(it);
            } else if name.starts_with(TEMP_DIR_PREFIX) {
                temps.push(name);
            }
        }
        iters.sort_unstable();
        Ok((iters, temps))
    }

    /// Iteration directories covered by the tracker, ascending.
    pub fn committed_iterations(&self) -> Result<Vec<u64>> {
        let Some(t) = read_tracker_opt(&self.cfg.root)? else {
            return Ok(Vec::new());
        };
        let (iters, _) = self.scan()?;
        Ok(iters
            .into_iter()
            .filter(|&i| i <= t.latest_iteration)
            .collect())
    }

    /// Removes temporary directories and iteration directories the tracker
    /// does not cover. Returns the removed directory names.
    pub fn remove_orphans(&self) -> Result<Vec<String>> {
        let _lock = self.lock()?;
        self.remove_orphans_locked()
    }

    fn remove_orphans_locked(&self) -> Result<Vec<String>> {
        let latest = read_tracker_opt(&self.cfg.root)?.map(|t| t.latest_iteration);
        let (iters, temps) = self.scan()?;
        let mut removed = Vec::new();
        for name in temps {
            let p = self.cfg.root.join(&name);
            fs::remove_dir_all(&p).at(&p)?;
            removed.push(name);
        }
        for it in iters {
            if latest.is_none_or(|l| it > l) {
                let p = self.iteration_dir(it);
                fs::remove_dir_all(&p).at(&p)?;
                removed.push(iteration_dir_name(it));
            }
        }
        let tmp_tracker = self.cfg.root.join(TRACKER_TEMP);
        if tmp_tracker.exists() {
            fs::remove_file(&tmp_tracker).at(&tmp_tracker)?;
        }
        Ok(removed)
    }

    /// Drops every committed checkpoint newer than `keep` (all of them when
    /// `None`) and rewinds the tracker to the newest remaining one. Returns
    /// the pruned iterations.
    pub fn prune_after(&mut self, keep: Option<u64>) -> Result<Vec<u64>> {
        let _lock = self.lock()?;
        self.remove_orphans_locked()?;
        let newer = |it: u64| keep.is_none_or(|k| it > k);
        let (iters, _) = self.scan()?;
        let pruned: Vec<u64> = iters.iter().copied().filter(|&i| newer(i)).collect();
        let remaining = iters.iter().copied().filter(|&i| !newer(i)).max();
        if pruned.is_empty() && remaining.is_some() {
            return Ok(pruned);
        }
        match remaining {
            Some(it) => {
                let m = self.read_manifest(it)?.ok_or(Error::NotFound(it))?;
                self.write_tracker(TrackerState {
                    latest_iteration: it,
                    latest_base_iteration: m.base_iteration,
                })?;
            }
            None => {
                let p = tracker_path(&self.cfg.root);
                if p.exists() {
                    fs::remove_file(&p).at(&p)?;
                }
            }
        }
        // Tracker first, so a crash here leaves only orphans.
        for &it in &pruned {
            let p = self.iteration_dir(it);
            fs::remove_dir_all(&p).at(&p)?;
        }
        self.force_base = false;
        Ok(pruned)
    }

    pub fn inspect(&self) -> Result<StoreSummary> {
        let tracker = read_tracker_opt(&self.cfg.root)?;
        let (iters, temps) = self.scan()?;
        let mut checkpoints = Vec::new();
        let mut orphans = temps;
        for it in iters {
            if tracker.is_some_and(|t| it <= t.latest_iteration) {
                if let Some(m) = self.read_manifest(it)? {
                    checkpoints.push(m);
                }
            } else {
                orphans.push(iteration_dir_name(it));
            }
        }
        Ok(StoreSummary {
            root: self.cfg.root.clone(),
            tracker,
            checkpoints,
            orphans,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    fn store(dir: &Path, max_cached: usize) -> CheckpointStore {
        let mut cfg = StoreConfig::new(dir);
        cfg.max_cached_iteration = max_cached;
        CheckpointStore::open(cfg).unwrap()
    }

    #[test]
    fn dir_names_sort_numerically() {
        assert_eq!(iteration_dir_name(100), "iter_0000100");
        assert_eq!(parse_iteration_dir("iter_0000100"), Some(100));
        assert_eq!(parse_iteration_dir("iter_12345678"), Some(12345678));
        assert_eq!(parse_iteration_dir("iter_12"), None);
        assert_eq!(parse_iteration_dir(".tmp_iter_0000001"), None);
    }

    #[test]
    fn plan_rule() {
        let head = |length| {
            Some(ChainHead {
                latest: 9,
                base: 0,
                length,
            })
        };
        assert_eq!(plan_kind(10, None, 5).kind, CheckpointKind::Base);
        assert_eq!(plan_kind(10, head(4), 5).kind, CheckpointKind::Delta);
        assert_eq!(plan_kind(10, head(4), 5).parent_iteration, Some(9));
        assert_eq!(plan_kind(10, head(5), 5).kind, CheckpointKind::Base);
        assert_eq!(plan_kind(10, head(1), 1).kind, CheckpointKind::Base);
    }

    #[test]
    fn tracker_round_trip_and_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let s = store(dir.path(), 5);
        assert!(matches!(s.read_tracker(), Err(Error::TrackerMissing(_))));
        let st = TrackerState {
            latest_iteration: 100,
            latest_base_iteration: 80,
        };
        s.write_tracker(st).unwrap();
        assert_eq!(s.read_tracker().unwrap(), st);
        assert_eq!(
            fs::read_to_string(tracker_path(dir.path())).unwrap(),
            "100\n80\n"
        );
        for bad in ["100\n", "abc\n80\n", "80\n100\n", "1\n2\n3\n"] {
            fs::write(tracker_path(dir.path()), bad).unwrap();
            assert!(
                matches!(s.read_tracker(), Err(Error::TrackerParse { .. })),
                "{bad:?}"
            );
        }
        assert!(matches!(
            s.load_checkpoint(None),
            Err(Error::TrackerParse { .. })
        ));
    }

    #[test]
    fn tracker_crash_before_rename_keeps_previous_state() {
        let dir = tempfile::tempdir().unwrap();
        let old = TrackerState {
            latest_iteration: 10,
            latest_base_iteration: 0,
        };
        write_tracker(dir.path(), old, &FaultInjector::new()).unwrap();
        let inj = FaultInjector::armed(CrashPoint::TrackerAfterTempWrite, 1);
        let new = TrackerState {
            latest_iteration: 20,
            latest_base_iteration: 20,
        };
        assert!(write_tracker(dir.path(), new, &inj)
            .unwrap_err()
            .is_injected_crash());
        assert_eq!(read_tracker(dir.path()).unwrap(), old);
    }

    #[test]
    fn first_save_is_base_and_loads_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = store(dir.path(), 5);
        let ckpt = synth::random_checkpoint(0, &[64, 33], &[50], 1);
        let m = s.save_checkpoint(&ckpt, None).unwrap();
        assert_eq!(m.kind, CheckpointKind::Base);
        assert_eq!(
            s.read_tracker().unwrap(),
            TrackerState {
                latest_iteration: 0,
                latest_base_iteration: 0
            }
        );
        assert_eq!(
            fs::read_to_string(s.iteration_dir(0).join(TYPE_FILE)).unwrap(),
            "base\n"
        );
        let back = s.load_checkpoint(None).unwrap();
        assert_eq!(back.model_states, ckpt.model_states);
        assert_eq!(back.optimizer_states.len(), 1);
    }

    #[test]
    fn base_refresh_counts_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = store(dir.path(), 5);
        let mut prev: Option<Checkpoint> = None;
        let mut kinds = Vec::new();
        let mut cur = synth::random_checkpoint(0, &[100], &[20], 2);
        for it in [0u64, 10, 20, 30, 40, 50, 60] {
            if it > 0 {
                cur = synth::mutate(&cur, it, 0.1, it);
            }
            let m = s.save_checkpoint(&cur, prev.as_ref()).unwrap();
            kinds.push(m.kind);
            prev = Some(s.load_checkpoint(None).unwrap());
        }
        use CheckpointKind::*;
        assert_eq!(kinds, vec![Base, Delta, Delta, Delta, Delta, Base, Delta]);
        assert_eq!(s.read_tracker().unwrap().latest_base_iteration, 50);
    }

    #[test]
    fn delta_requires_matching_prev() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = store(dir.path(), 5);
        let c0 = synth::random_checkpoint(0, &[16], &[], 3);
        s.save_checkpoint(&c0, None).unwrap();
        let c1 = synth::mutate(&c0, 1, 0.2, 4);
        assert!(matches!(
            s.save_checkpoint(&c1, None),
            Err(Error::MissingPrev {
                iteration: 1,
                parent: 0
            })
        ));
        let other = synth::mutate(&c0, 7, 0.2, 5);
        assert!(matches!(
            s.save_checkpoint(&c1, Some(&other)),
            Err(Error::PrevMismatch {
                given: 7,
                expected: 0
            })
        ));
        assert!(matches!(
            s.save_checkpoint(&c0, Some(&c0)),
            Err(Error::StaleIteration { .. })
        ));
    }

    #[test]
    fn heavy_change_falls_back_to_raw() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = store(dir.path(), 5);
        let c0 = synth::random_checkpoint(0, &[256, 256], &[], 6);
        s.save_checkpoint(&c0, None).unwrap();
        let mut c1 = synth::mutate(&c0, 1, 1.0, 7);
        c1.model_states[1] = c0.model_states[1].clone();
        let m = s.save_checkpoint(&c1, Some(&c0)).unwrap();
        assert_eq!(m.kind, CheckpointKind::Delta);
        assert_eq!(m.entries[0].codec, Codec::Raw);
        assert_eq!(m.entries[1].codec, Codec::Delta);
        assert_eq!(
            s.load_checkpoint(None).unwrap().model_states,
            c1.model_states
        );
    }

    #[test]
    fn missing_middle_link_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = store(dir.path(), 10);
        let mut cur = synth::random_checkpoint(0, &[40], &[10], 8);
        s.save_checkpoint(&cur, None).unwrap();
        for it in 1..=3 {
            let next = synth::mutate(&cur, it, 0.1, it);
            s.save_checkpoint(&next, Some(&cur)).unwrap();
            cur = next;
        }
        fs::remove_dir_all(s.iteration_dir(2)).unwrap();
        assert!(matches!(
            s.load_checkpoint(None),
            Err(Error::MissingLink {
                missing: 2,
                needed_by: 3
            })
        ));
        assert!(matches!(
            s.load_checkpoint(Some(2)),
            Err(Error::NotFound(2))
        ));
        assert!(s.load_checkpoint(Some(1)).is_ok());
    }

    #[test]
    fn type_file_disagreement_detected() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = store(dir.path(), 5);
        s.save_checkpoint(&synth::random_checkpoint(0, &[8], &[], 9), None)
            .unwrap();
        fs::write(s.iteration_dir(0).join(TYPE_FILE), "delta\n").unwrap();
        assert!(matches!(
            s.load_checkpoint(None),
            Err(Error::TypeMismatch { iteration: 0, .. })
        ));
    }

    #[test]
    fn corrupt_manifest_and_tensors_detected() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = store(dir.path(), 5);
        s.save_checkpoint(&synth::random_checkpoint(0, &[8], &[4], 10), None)
            .unwrap();
        let tpath = s.iteration_dir(0).join(TENSORS_FILE);
        let mut t = fs::read(&tpath).unwrap();
        let last = t.len() - 1;
        t[last] ^= 1;
        fs::write(&tpath, &t).unwrap();
        assert!(matches!(
            s.load_checkpoint(None),
            Err(Error::CorruptManifest { .. })
        ));
        fs::write(s.iteration_dir(0).join(MANIFEST_FILE), b"junk").unwrap();
        assert!(matches!(
            s.load_checkpoint(None),
            Err(Error::CorruptManifest { .. })
        ));
    }

    #[test]
    fn tracker_base_disagreement_detected() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = store(dir.path(), 5);
        s.save_checkpoint(&synth::random_checkpoint(3, &[8], &[], 11), None)
            .unwrap();
        fs::write(tracker_path(dir.path()), "3\n1\n").unwrap();
        assert!(matches!(
            s.load_checkpoint(None),
            Err(Error::TrackerMismatch(_))
        ));
    }

    #[test]
    fn crash_mid_save_never_exposes_partial_state() {
        for point in [
            CrashPoint::PersistAfterTempDir,
            CrashPoint::PersistAfterTensors,
            CrashPoint::PersistAfterManifest,
            CrashPoint::PersistAfterTypeFile,
            CrashPoint::PersistAfterDirRename,
            CrashPoint::TrackerAfterTempWrite,
            CrashPoint::TrackerAfterRename,
        ] {
            let dir = tempfile::tempdir().unwrap();
            let c0 = synth::random_checkpoint(0, &[32], &[8], 12);
            let c1 = synth::mutate(&c0, 1, 0.3, 13);
            let mut cfg = StoreConfig::new(dir.path());
            cfg.max_cached_iteration = 5;
            {
                let mut s = CheckpointStore::open(cfg.clone()).unwrap();
                s.save_checkpoint(&c0, None).unwrap();
            }
            let inj = FaultInjector::armed(point, 1);
            let mut s = CheckpointStore::open_with_faults(cfg.clone(), inj).unwrap();
            let r = s.save_checkpoint(&c1, Some(&c0));
            let s = CheckpointStore::open(cfg.clone()).unwrap();
            let t = s.read_tracker().unwrap();
            let loaded = s.load_checkpoint(None).unwrap();
            if point == CrashPoint::TrackerAfterRename {
                assert!(r.unwrap_err().is_injected_crash());
                assert_eq!(t.latest_iteration, 1);
                assert_eq!(loaded.model_states, c1.model_states);
            } else {
                assert!(r.unwrap_err().is_injected_crash(), "{point:?}");
                assert_eq!(t.latest_iteration, 0, "{point:?}");
                assert_eq!(loaded.model_states, c0.model_states);
                s.remove_orphans().unwrap();
                let mut s = CheckpointStore::open(cfg).unwrap();
                s.save_checkpoint(&c1, Some(&c0)).unwrap();
                assert_eq!(
                    s.load_checkpoint(None).unwrap().model_states,
                    c1.model_states
                );
            }
        }
    }

    #[test]
    fn io_failure_removes_partial_dir_and_forces_base() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = store(dir.path(), 5);
        let c0 = synth::random_checkpoint(0, &[32], &[], 14);
        s.save_checkpoint(&c0, None).unwrap();
        // A plain file where the temp dir goes makes create_dir fail.
        fs::write(dir.path().join(".tmp_iter_0000001"), b"x").unwrap();
        fs::create_dir(dir.path().join(".tmp_iter_0000001.blocker")).unwrap();
        let c1 = synth::mutate(&c0, 1, 0.1, 15);
        let mut perms = fs::metadata(dir.path()).unwrap().permissions();
        use std::os::unix::fs::PermissionsExt;
        perms.set_mode(0o555);
        fs::set_permissions(dir.path(), perms.clone()).unwrap();
        let r = s.save_checkpoint(&c1, Some(&c0));
        perms.set_mode(0o755);
        fs::set_permissions(dir.path(), perms).unwrap();
        if r.is_ok() {
            // Running as root: permission bits are not enforced.
            return;
        }
        assert!(!s.iteration_dir(1).exists());
        assert_eq!(s.plan(2).unwrap().kind, CheckpointKind::Base);
    }

    #[test]
    fn lock_excludes_second_writer() {
        let dir = tempfile::tempdir().unwrap();
        let s = store(dir.path(), 5);
        let _held = s.lock().unwrap();
        let mut other = store(dir.path(), 5);
        let c = synth::random_checkpoint(0, &[4], &[], 16);
        assert!(matches!(
            other.save_checkpoint(&c, None),
            Err(Error::Locked(_))
        ));
    }

    #[test]
    fn prune_rewinds_tracker() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = store(dir.path(), 3);
        let mut cur = synth::random_checkpoint(0, &[16], &[4], 17);
        s.save_checkpoint(&cur, None).unwrap();
        for it in 1..=4 {
            let next = synth::mutate(&cur, it, 0.2, it);
            s.save_checkpoint(&next, Some(&cur)).unwrap();
            cur = next;
        }
        assert_eq!(s.read_tracker().unwrap().latest_base_iteration, 3);
        assert_eq!(s.prune_after(Some(2)).unwrap(), vec![3, 4]);
        assert_eq!(
            s.read_tracker().unwrap(),
            TrackerState {
                latest_iteration: 2,
                latest_base_iteration: 0
            }
        );
        assert!(s.load_checkpoint(None).is_ok());
        assert_eq!(s.committed_iterations().unwrap(), vec![0, 1, 2]);
        assert_eq!(s.prune_after(None).unwrap(), vec![0, 1, 2]);
        assert!(matches!(s.read_tracker(), Err(Error::TrackerMissing(_))));
        assert_eq!(s.plan(9).unwrap().kind, CheckpointKind::Base);
    }

    #[test]
    fn env_override() {
        // Only this test touches the variable.
        unsafe { std::env::set_var(ENV_MAX_CACHED_ITERATION, "7") };
        let cfg = StoreConfig::new("/tmp/x").with_env_override().unwrap();
        assert_eq!(cfg.max_cached_iteration, 7);
        unsafe { std::env::set_var(ENV_MAX_CACHED_ITERATION, "zero") };
        assert!(StoreConfig::new("/tmp/x").with_env_override().is_err());
        unsafe { std::env::remove_var(ENV_MAX_CACHED_ITERATION) };
    }

    #[test]
    fn encoded_round_trip() {
        let c0 = synth::random_checkpoint(0, &[30, 7], &[12, 0], 18);
        let plan = plan_kind(0, None, 5);
        let enc = encode_checkpoint(&c0, None, &plan, 16).unwrap();
        assert_eq!(enc.manifest.entries[3].codec, Codec::Raw);
        let back = EncodedCheckpoint::from_bytes(&enc.to_bytes()).unwrap();
        assert_eq!(back, enc);
        let mut bytes = enc.to_bytes();
        let n = bytes.len();
        bytes[n - 1] ^= 0xFF;
        assert!(EncodedCheckpoint::from_bytes(&bytes).is_err());
    }
}
