//! Post-failure recovery: every rank reports what it can load, the ranks agree
//! on the newest iteration loadable everywhere, and newer copies are pruned.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Condvar, Mutex};

use serde::Serialize;

use super::slots::{SlotRegion, SlotState};
use crate::error::Result;
use crate::store::{self, CheckpointStore, EncodedCheckpoint, StoreConfig};
use crate::tensor::Checkpoint;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RankReport {
    pub rank: u32,
    /// Newest iteration this rank can reconstruct.
    pub latest_valid_iteration: Option<u64>,
    /// Every iteration this rank can reconstruct, ascending.
    pub loadable: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryDecision {
    Resume(u64),
    /// No iteration is loadable on every rank; training restarts from scratch.
    ColdStart,
}

impl RecoveryDecision {
    pub fn iteration(self) -> Option<u64> {
        match self {
            RecoveryDecision::Resume(it) => Some(it),
            RecoveryDecision::ColdStart => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PruneReport {
    pub rank: u32,
    /// Iterations dropped from memory slots, including torn and corrupt ones.
    pub memory: Vec<u64>,
    /// Iteration directories removed from disk.
    pub disk: Vec<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RecoveryOutcome {
    pub reports: Vec<RankReport>,
    pub decision: RecoveryDecision,
    pub pruned: Vec<PruneReport>,
}

/// Newest iteration at or below every rank's latest that all ranks can load.
pub fn decide(reports: &[RankReport]) -> RecoveryDecision {
    if reports.is_empty() || reports.iter().any(|r| r.latest_valid_iteration.is_none()) {
        return RecoveryDecision::ColdStart;
    }
    let ceiling = reports
        .iter()
        .filter_map(|r| r.latest_valid_iteration)
        .min()
        .expect("non-empty");
    let mut common: BTreeSet<u64> = reports[0].loadable.iter().copied().collect();
    for r in &reports[1..] {
        let other: BTreeSet<u64> = r.loadable.iter().copied().collect();
        common = common.intersection(&other).copied().collect();
    }
    match common.range(..=ceiling).next_back() {
        Some(&it) => RecoveryDecision::Resume(it),
        None => RecoveryDecision::ColdStart,
    }
}

/// What one rank holds: verified memory slots plus its on-disk store.
pub struct RankView {
    rank: u32,
    region: Option<Arc<SlotRegion>>,
    memory: BTreeMap<u64, EncodedCheckpoint>,
    disk: BTreeSet<u64>,
    store: CheckpointStore,
}

impl std::fmt::Debug for RankView {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RankView")
            .field("rank", &self.rank)
            .field("memory", &self.memory.keys().collect::<Vec<_>>())
            .field("disk", &self.disk)
            .finish()
    }
}

impl RankView {
    /// `cfg.root` is this rank's store root.
    pub fn open(region: Option<Arc<SlotRegion>>, rank: u32, cfg: StoreConfig) -> Result<Self> {
        let store = CheckpointStore::open(cfg)?;
        let disk = store.committed_iterations()?.into_iter().collect();
        let mut memory = BTreeMap::new();
        if let Some(region) = &region {
            for i in region.rank_slots(rank) {
                let Some((info, payload)) = region.read_payload(i) else {
                    continue;
                };
                match EncodedCheckpoint::from_bytes(&payload) {
                    Ok(enc) if enc.iteration() == info.iteration => {
                        memory.insert(info.iteration, enc);
                    }
                    Ok(_) | Err(_) => {
                        log::warn!("rank {rank}: slot {i} holds an undecodable payload")
                    }
                }
            }
        }
        Ok(RankView {
            rank,
            region,
            memory,
            disk,
            store,
        })
    }

    pub fn rank(&self) -> u32 {
        self.rank
    }

    pub fn memory_iterations(&self) -> Vec<u64> {
        self.memory.keys().copied().collect()
    }

    pub fn disk_iterations(&self) -> Vec<u64> {
        self.disk.iter().copied().collect()
    }

    fn fetch(&self, iteration: u64) -> Result<Option<EncodedCheckpoint>> {
        if let Some(enc) = self.memory.get(&iteration) {
            return Ok(Some(enc.clone()));
        }
        if self.disk.contains(&iteration) {
            return self.store.read_encoded(iteration);
        }
        Ok(None)
    }

    /// Encoded checkpoints from the base of `iteration` up to it.
    pub fn chain(&self, iteration: u64) -> Result<Vec<EncodedCheckpoint>> {
        store::resolve_chain(iteration, |it| self.fetch(it))
    }

    pub fn is_loadable(&self, iteration: u64) -> bool {
        self.chain(iteration).is_ok()
    }

    pub fn loadable(&self) -> Vec<u64> {
        let all: BTreeSet<u64> = self.memory.keys().chain(&self.disk).copied().collect();
        all.into_iter().filter(|&it| self.is_loadable(it)).collect()
    }

    pub fn report(&self) -> RankReport {
        let loadable = self.loadable();
        RankReport {
            rank: self.rank,
            latest_valid_iteration: loadable.last().copied(),
            loadable,
        }
    }

    pub fn load(&self, iteration: u64) -> Result<Checkpoint> {
        store::reconstruct(&self.chain(iteration)?)
    }

    /// Drops every memory and disk copy newer than `keep` (everything when
    /// `None`), plus torn or corrupt slots.
    pub fn prune_after(&mut self, keep: Option<u64>) -> Result<PruneReport> {
        let newer = |it: u64| keep.is_none_or(|k| it > k);
        let mut memory = BTreeSet::new();
        if let Some(region) = &self.region {
            for i in region.rank_slots(self.rank) {
                let info = region.info(i);
                let drop = match info.state {
                    SlotState::Empty => false,
                    SlotState::Writing => true,
                    SlotState::Valid | SlotState::Persisted => {
                        newer(info.iteration) || !self.memory.contains_key(&info.iteration)
                    }
                };
                if drop {
                    region.clear(i);
                    memory.insert(info.iteration);
                }
            }
            region.flush()?;
        }
        self.memory.retain(|&it, _| !newer(it));
        let disk = self.store.prune_after(keep)?;
        self.disk = self.store.committed_iterations()?.into_iter().collect();
        Ok(PruneReport {
            rank: self.rank,
            memory: memory.into_iter().collect(),
            disk,
        })
    }
}

/// Reports from every view, the decision, then pruning on every rank.
pub fn recover(views: &mut [RankView]) -> Result<RecoveryOutcome> {
    let reports: Vec<RankReport> = views.iter().map(RankView::report).collect();
    let decision = decide(&reports);
    let pruned = views
        .iter_mut()
        .map(|v| v.prune_after(decision.iteration()))
        .collect::<Result<_>>()?;
    Ok(RecoveryOutcome {
        reports,
        decision,
        pruned,
    })
}

#[derive(Debug, Default)]
struct BarrierState {
    pending: BTreeMap<u32, RankReport>,
    generation: u64,
    last: Vec<RankReport>,
}

/// Blocking all-gather of rank reports among `ranks` participants.
#[derive(Debug)]
pub struct ReportBarrier {
    ranks: usize,
    state: Mutex<BarrierState>,
    cv: Condvar,
}

impl ReportBarrier {
    pub fn new(ranks: usize) -> Self {
        ReportBarrier {
            ranks,
            state: Mutex::new(BarrierState::default()),
            cv: Condvar::new(),
        }
    }

    /// Blocks until every rank has contributed; returns all reports by rank.
    pub fn all_gather(&self, report: RankReport) -> Vec<RankReport> {
        let mut st = self.state.lock().unwrap();
        let generation = st.generation;
        st.pending.insert(report.rank, report);
        if st.pending.len() == self.ranks {
            st.last = std::mem::take(&mut st.pending).into_values().collect();
            st.generation += 1;
            self.cv.notify_all();
            return st.last.clone();
        }
        let st = self
            .cv
            .wait_while(st, |s| s.generation == generation)
            .unwrap();
        st.last.clone()
    }
}

/// One rank's side of recovery: report, all-gather, decide, prune.
pub fn recover_rank(view: &mut RankView, barrier: &ReportBarrier) -> Result<RecoveryOutcome> {
    let reports = barrier.all_gather(view.report());
    let decision = decide(&reports);
    let pruned = view.prune_after(decision.iteration())?;
    Ok(RecoveryOutcome {
        reports,
        decision,
        pruned: vec![pruned],
    })
}
