//! Memory-mapped slot region shared by training-side clients and the agent.
//!
//! ```text
//! region header (64 bytes)
//!   0  magic "BSSR"        4  version u32
//!   8  ranks u32          12  slots per rank u32
//!  16  slot capacity u64  24  checksum failures u64
//!  32  persist failures u64  40  backpressure events u64
//! slot i at 64 + i * stride, stride = 64 + capacity rounded up to 64
//!   0  state u32           4  rank u32
//!   8  iteration u64      16  checksum u64
//!  24  payload length u64 32  stage sequence u64
//!  64  payload
//! ```
//!
//! Slot states move EMPTY → WRITING → VALID → PERSISTED; a PERSISTED slot may
//! be reclaimed for a new iteration. VALID slots are never reclaimed, so a
//! staged checkpoint is always either in memory or on disk.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};

use memmap2::MmapRaw;
use serde::Serialize;

use super::fault::{CrashPoint, FaultInjector};
use crate::error::{Error, IoContext, Result};

pub const REGION_MAGIC: &[u8; 4] = b"BSSR";
pub const REGION_VERSION: u32 = 1;
pub const REGION_HEADER: u64 = 64;
pub const SLOT_HEADER: u64 = 64;

/// Digest stored with every staged payload (xxh3-64).
pub fn checksum(payload: &[u8]) -> u64 {
    xxhash_rust::xxh3::xxh3_64(payload)
}

/// `checksum(&[])`.
pub const EMPTY_CHECKSUM: u64 = 0x2D06_8005_38D3_94C2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SlotState {
    Empty,
    Writing,
    Valid,
    Persisted,
}

impl SlotState {
    fn from_raw(v: u32) -> Self {
        match v {
            1 => SlotState::Writing,
            2 => SlotState::Valid,
            3 => SlotState::Persisted,
            _ => SlotState::Empty,
        }
    }

    fn raw(self) -> u32 {
        match self {
            SlotState::Empty => 0,
            SlotState::Writing => 1,
            SlotState::Valid => 2,
            SlotState::Persisted => 3,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            SlotState::Empty => "EMPTY",
            SlotState::Writing => "WRITING",
            SlotState::Valid => "VALID",
            SlotState::Persisted => "PERSISTED",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SlotInfo {
    pub index: usize,
    pub state: SlotState,
    pub rank: u32,
    pub iteration: u64,
    pub checksum: u64,
    pub len: u64,
    pub sequence: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RegionCounters {
    pub checksum_failures: u64,
    pub persist_failures: u64,
    pub backpressure: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Counter {
    ChecksumFailure,
    PersistFailure,
    Backpressure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageReceipt {
    pub slot: usize,
    /// Iteration whose persisted slot was reclaimed.
    pub evicted: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RegionGeometry {
    pub ranks: u32,
    pub slots_per_rank: u32,
    pub slot_capacity: u64,
}

impl RegionGeometry {
    pub fn stride(&self) -> u64 {
        SLOT_HEADER + self.slot_capacity.div_ceil(64) * 64
    }

    pub fn total_slots(&self) -> usize {
        self.ranks as usize * self.slots_per_rank as usize
    }

    pub fn file_len(&self) -> u64 {
        REGION_HEADER + self.total_slots() as u64 * self.stride()
    }

    fn validate(&self) -> Result<()> {
        if self.ranks == 0 || self.slots_per_rank == 0 || self.slot_capacity == 0 {
            return Err(Error::SlotRegion(format!("degenerate geometry {self:?}")));
        }
        Ok(())
    }
}

struct SlotView<'a> {
    state: &'a AtomicU32,
    rank: &'a AtomicU32,
    iteration: &'a AtomicU64,
    checksum: &'a AtomicU64,
    len: &'a AtomicU64,
    sequence: &'a AtomicU64,
    payload: *mut u8,
}

pub struct SlotRegion {
    map: MmapRaw,
    path: PathBuf,
    geo: RegionGeometry,
}

// SAFETY: all shared header fields are accessed through atomics; payload
// bytes are written only by the claimant of a WRITING slot and read only
// after an Acquire load observes VALID or PERSISTED, with a checksum check
// against torn reads.
unsafe impl Send for SlotRegion {}
unsafe impl Sync for SlotRegion {}

impl std::fmt::Debug for SlotRegion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SlotRegion")
            .field("path", &self.path)
            .field("geometry", &self.geo)
            .finish()
    }
}

impl SlotRegion {
    /// Creates (or truncates) the region file with all slots EMPTY.
    pub fn create(path: &Path, geo: RegionGeometry) -> Result<Self> {
        geo.validate()?;
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(true)
            .open(path)
            .at(path)?;
        file.set_len(geo.file_len()).at(path)?;
        let map = MmapRaw::map_raw(&file).at(path)?;
        let region = SlotRegion {
            map,
            path: path.to_path_buf(),
            geo,
        };
        let h = region.base();
        // SAFETY: the mapping is at least REGION_HEADER bytes and freshly zeroed.
        unsafe {
            std::ptr::copy_nonoverlapping(REGION_MAGIC.as_ptr(), h, 4);
            (h.add(4) as *mut u32).write(REGION_VERSION.to_le());
            (h.add(8) as *mut u32).write(geo.ranks.to_le());
            (h.add(12) as *mut u32).write(geo.slots_per_rank.to_le());
            (h.add(16) as *mut u64).write(geo.slot_capacity.to_le());
        }
        region.flush()?;
        Ok(region)
    }

    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .open(path)
            .at(path)?;
        let len = file.metadata().at(path)?.len();
        if len < REGION_HEADER {
            return Err(Error::SlotRegion(format!(
                "{} is too short",
                path.display()
            )));
        }
        let map = MmapRaw::map_raw(&file).at(path)?;
        let h = map.as_mut_ptr();
        // SAFETY: length checked above.
        let (magic, version, geo) = unsafe {
            let mut magic = [0u8; 4];
            std::ptr::copy_nonoverlapping(h, magic.as_mut_ptr(), 4);
            (
                magic,
                u32::from_le((h.add(4) as *const u32).read()),
                RegionGeometry {
                    ranks: u32::from_le((h.add(8) as *const u32).read()),
                    slots_per_rank: u32::from_le((h.add(12) as *const u32).read()),
                    slot_capacity: u64::from_le((h.add(16) as *const u64).read()),
                },
            )
        };
        if &magic != REGION_MAGIC {
            return Err(Error::BadMagic {
                expected: *REGION_MAGIC,
                found: magic,
            });
        }
        if version != REGION_VERSION {
            return Err(Error::UnsupportedVersion {
                format: "BSSR slot region",
                version: version as u16,
            });
        }
        geo.validate()?;
        if geo.file_len() != len {
            return Err(Error::SlotRegion(format!(
                "{} is {len} bytes, geometry needs {}",
                path.display(),
                geo.file_len()
            )));
        }
        Ok(SlotRegion {
            map,
            path: path.to_path_buf(),
            geo,
        })
    }

    /// Opens an existing region with the same geometry, or creates one.
    pub fn open_or_create(path: &Path, geo: RegionGeometry) -> Result<Self> {
        if !path.exists() {
            return Self::create(path, geo);
        }
        let region = Self::open(path)?;
        if region.geo != geo {
            return Err(Error::SlotRegion(format!(
                "{} has geometry {:?}, requested {:?}",
                path.display(),
                region.geo,
                geo
            )));
        }
        Ok(region)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn geometry(&self) -> RegionGeometry {
        self.geo
    }

    pub fn mapped_len(&self) -> u64 {
        self.map.len() as u64
    }

    pub fn flush(&self) -> Result<()> {
        self.map.flush().at(&self.path)
    }

    fn base(&self) -> *mut u8 {
        self.map.as_mut_ptr()
    }

    fn counter(&self, c: Counter) -> &AtomicU64 {
        let off = match c {
            Counter::ChecksumFailure => 24,
            Counter::PersistFailure => 32,
            Counter::Backpressure => 40,
        };
        // SAFETY: in-bounds, 8-aligned (mapping is page-aligned).
        unsafe { &*(self.base().add(off) as *const AtomicU64) }
    }

    pub fn bump(&self, c: Counter) {
        self.counter(c).fetch_add(1, Ordering::Relaxed);
    }

    pub fn counters(&self) -> RegionCounters {
        RegionCounters {
            checksum_failures: self
                .counter(Counter::ChecksumFailure)
                .load(Ordering::Relaxed),
            persist_failures: self
                .counter(Counter::PersistFailure)
                .load(Ordering::Relaxed),
            backpressure: self.counter(Counter::Backpressure).load(Ordering::Relaxed),
        }
    }

    fn slot(&self, index: usize) -> SlotView<'_> {
        assert!(index < self.geo.total_slots(), "slot {index} out of range");
        // SAFETY: index checked; every field is in-bounds and naturally aligned
        // because REGION_HEADER and the stride are multiples of 64.
        unsafe {
            let p = self
                .base()
                .add((REGION_HEADER + index as u64 * self.geo.stride()) as usize);
            SlotView {
                state: &*(p as *const AtomicU32),
                rank: &*(p.add(4) as *const AtomicU32),
                iteration: &*(p.add(8) as *const AtomicU64),
                checksum: &*(p.add(16) as *const AtomicU64),
                len: &*(p.add(24) as *const AtomicU64),
                sequence: &*(p.add(32) as *const AtomicU64),
                payload: p.add(SLOT_HEADER as usize),
            }
        }
    }

    /// Slot indices owned by `rank`.
    pub fn rank_slots(&self, rank: u32) -> std::ops::Range<usize> {
        let k = self.geo.slots_per_rank as usize;
        rank as usize * k..(rank as usize + 1) * k
    }

    pub fn info(&self, index: usize) -> SlotInfo {
        let s = self.slot(index);
        SlotInfo {
            index,
            state: SlotState::from_raw(s.state.load(Ordering::Acquire)),
            rank: s.rank.load(Ordering::Relaxed),
            iteration: s.iteration.load(Ordering::Relaxed),
            checksum: s.checksum.load(Ordering::Relaxed),
            len: s.len.load(Ordering::Relaxed),
            sequence: s.sequence.load(Ordering::Relaxed),
        }
    }

    pub fn slots(&self) -> Vec<SlotInfo> {
        (0..self.geo.total_slots()).map(|i| self.info(i)).collect()
    }

    /// Copies `payload` into a free slot of `rank` and marks it VALID.
    ///
    /// Takes an EMPTY slot if there is one, else reclaims the oldest PERSISTED
    /// slot. With every slot VALID or WRITING it fails with backpressure.
    pub fn stage(
        &self,
        rank: u32,
        iteration: u64,
        payload: &[u8],
        faults: &FaultInjector,
    ) -> Result<StageReceipt> {
        if rank >= self.geo.ranks {
            return Err(Error::RankOutOfRange(rank));
        }
        if payload.len() as u64 > self.geo.slot_capacity {
            return Err(Error::PayloadTooLarge {
                len: payload.len() as u64,
                capacity: self.geo.slot_capacity,
            });
        }
        let infos: Vec<SlotInfo> = self.rank_slots(rank).map(|i| self.info(i)).collect();
        if let Some(newest) = infos
            .iter()
            .filter(|s| matches!(s.state, SlotState::Valid | SlotState::Persisted))
            .map(|s| s.iteration)
            .max()
        {
            if iteration <= newest {
                return Err(Error::StaleIteration { iteration, newest });
            }
        }
        let victim = infos
            .iter()
            .find(|s| s.state == SlotState::Empty)
            .or_else(|| {
                infos
                    .iter()
                    .filter(|s| s.state == SlotState::Persisted)
                    .min_by_key(|s| s.iteration)
            })
            .copied();
        let Some(victim) = victim else {
            self.bump(Counter::Backpressure);
            return Err(Error::Backpressure { rank });
        };
        let s = self.slot(victim.index);
        if s.state
            .compare_exchange(
                victim.state.raw(),
                SlotState::Writing.raw(),
                Ordering::AcqRel,
                Ordering::Acquire,
            )
            .is_err()
        {
            self.bump(Counter::Backpressure);
            return Err(Error::Backpressure { rank });
        }
        let evicted = (victim.state == SlotState::Persisted).then_some(victim.iteration);
        let sequence = infos.iter().map(|s| s.sequence).max().unwrap_or(0) + 1;
        s.rank.store(rank, Ordering::Relaxed);
        s.iteration.store(iteration, Ordering::Relaxed);
        s.len.store(payload.len() as u64, Ordering::Relaxed);
        s.sequence.store(sequence, Ordering::Relaxed);
        faults.check(CrashPoint::StageAfterClaim)?;
        let half = payload.len() / 2;
        // SAFETY: the slot is WRITING and owned by this call; len ≤ capacity.
        unsafe { std::ptr::copy_nonoverlapping(payload.as_ptr(), s.payload, half) };
        faults.check(CrashPoint::StageMidCopy)?;
        unsafe {
            std::ptr::copy_nonoverlapping(
                payload.as_ptr().add(half),
                s.payload.add(half),
                payload.len() - half,
            )
        };
        s.checksum.store(checksum(payload), Ordering::Relaxed);
        faults.check(CrashPoint::StageBeforeSeal)?;
        s.state.store(SlotState::Valid.raw(), Ordering::Release);
        Ok(StageReceipt {
            slot: victim.index,
            evicted,
        })
    }

    /// Copies out the payload of a VALID or PERSISTED slot. `None` if the
    /// slot holds no published payload or it fails its checksum.
    pub fn read_payload(&self, index: usize) -> Option<(SlotInfo, Vec<u8>)> {
        let before = self.info(index);
        if !matches!(before.state, SlotState::Valid | SlotState::Persisted)
            || before.len > self.geo.slot_capacity
        {
            return None;
        }
        let s = self.slot(index);
        let mut buf = vec![0u8; before.len as usize];
        // SAFETY: len ≤ capacity; the slot's payload is published.
        unsafe { std::ptr::copy_nonoverlapping(s.payload, buf.as_mut_ptr(), buf.len()) };
        let after = self.info(index);
        if after.iteration != before.iteration
            || after.sequence != before.sequence
            || checksum(&buf) != before.checksum
        {
            return None;
        }
        Some((before, buf))
    }

    /// VALID → PERSISTED for the slot still holding `iteration`.
    pub fn mark_persisted(&self, index: usize, iteration: u64) -> bool {
        let s = self.slot(index);
        s.iteration.load(Ordering::Relaxed) == iteration
            && s.state
                .compare_exchange(
                    SlotState::Valid.raw(),
                    SlotState::Persisted.raw(),
                    Ordering::AcqRel,
                    Ordering::Acquire,
                )
                .is_ok()
    }

    /// Returns a slot to EMPTY. Only for recovery and corrupt slots.
    pub fn clear(&self, index: usize) {
        let s = self.slot(index);
        s.state.store(SlotState::Empty.raw(), Ordering::Release);
    }

    /// Flips one payload byte. Test hook for corruption scenarios.
    #[doc(hidden)]
    pub fn corrupt_payload_byte(&self, index: usize, offset: usize) {
        let s = self.slot(index);
        assert!((offset as u64) < self.geo.slot_capacity);
        // SAFETY: offset bounded by capacity.
        unsafe { *s.payload.add(offset) ^= 0xFF };
    }

    /// Bytes held by non-EMPTY slots of `rank` (payload plus slot header).
    pub fn staged_bytes(&self, rank: u32) -> u64 {
        self.rank_slots(rank)
            .map(|i| self.info(i))
            .filter(|s| s.state != SlotState::Empty)
            .map(|s| s.len + SLOT_HEADER)
            .sum()
    }

    /// Human-readable state table.
    pub fn report(&self) -> String {
        let g = self.geo;
        let c = self.counters();
        let mut out = format!(
            "region {}: ranks={} slots_per_rank={} slot_capacity={}\n",
            self.path.display(),
            g.ranks,
            g.slots_per_rank,
            g.slot_capacity
        );
        out.push_str(&format!(
            "counters: checksum_failures={} persist_failures={} backpressure={}\n",
            c.checksum_failures, c.persist_failures, c.backpressure
        ));
        for s in self.slots() {
            let rank = s.index / g.slots_per_rank as usize;
            if s.state == SlotState::Empty {
                out.push_str(&format!("slot {:>3} rank {rank}: EMPTY\n", s.index));
            } else {
                out.push_str(&format!(
                    "slot {:>3} rank {rank}: {:<9} iteration={} len={} checksum={:016x}\n",
                    s.index,
                    s.state.label(),
                    s.iteration,
                    s.len,
                    s.checksum
                ));
            }
        }
        out
    }
}
