//! Training-side client: compresses a checkpoint and stages it into the rank's
//! slots. Disk I/O is left to the agent.

use std::sync::Arc;

use super::fault::FaultInjector;
use super::recovery::RankView;
use super::slots::{SlotRegion, StageReceipt};
use crate::error::{Error, Result};
use crate::store::{encode_checkpoint, plan_kind, ChainHead, CheckpointKind};
use crate::tensor::Checkpoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StagedCheckpoint {
    pub iteration: u64,
    pub kind: CheckpointKind,
    pub receipt: StageReceipt,
    pub bytes: u64,
}

#[derive(Debug)]
pub struct CheckpointClient {
    rank: u32,
    region: Arc<SlotRegion>,
    max_cached_iteration: usize,
    clusters: usize,
    faults: FaultInjector,
    head: Option<ChainHead>,
    prev: Option<Checkpoint>,
}

impl CheckpointClient {
    pub fn new(
        rank: u32,
        region: Arc<SlotRegion>,
        max_cached_iteration: usize,
        clusters: usize,
        faults: FaultInjector,
    ) -> Result<Self> {
        if rank >= region.geometry().ranks {
            return Err(Error::RankOutOfRange(rank));
        }
        if max_cached_iteration < 1 {
            return Err(Error::Config("max_cached_iteration must be >= 1".into()));
        }
        Ok(CheckpointClient {
            rank,
            region,
            max_cached_iteration,
            clusters,
            faults,
            head: None,
            prev: None,
        })
    }

    /// Continues the chain ending at `iteration` as seen by `view`.
    pub fn resume(mut self, view: &RankView, iteration: u64) -> Result<Self> {
        let chain = view.chain(iteration)?;
        self.head = Some(ChainHead {
            latest: iteration,
            base: chain[0].iteration(),
            length: chain.len(),
        });
        self.prev = Some(crate::store::reconstruct(&chain)?);
        Ok(self)
    }

    pub fn rank(&self) -> u32 {
        self.rank
    }

    pub fn head(&self) -> Option<ChainHead> {
        self.head
    }

    /// Encodes `ckpt` against the last staged checkpoint and stages it. The
    /// client's chain advances only when staging succeeds.
    pub fn save(&mut self, ckpt: Checkpoint) -> Result<StagedCheckpoint> {
        if let Some(h) = self.head {
            if ckpt.iteration <= h.latest {
                return Err(Error::StaleIteration {
                    iteration: ckpt.iteration,
                    newest: h.latest,
                });
            }
        }
        let plan = plan_kind(ckpt.iteration, self.head, self.max_cached_iteration);
        let enc = encode_checkpoint(&ckpt, self.prev.as_ref(), &plan, self.clusters)?;
        let payload = enc.to_bytes();
        let receipt = self
            .region
            .stage(self.rank, ckpt.iteration, &payload, &self.faults)?;
        self.head = Some(match (plan.kind, self.head) {
            (CheckpointKind::Delta, Some(h)) => ChainHead {
                latest: ckpt.iteration,
                base: h.base,
                length: h.length + 1,
            },
            _ => ChainHead {
                latest: ckpt.iteration,
                base: ckpt.iteration,
                length: 1,
            },
        });
        let staged = StagedCheckpoint {
            iteration: ckpt.iteration,
            kind: plan.kind,
            receipt,
            bytes: payload.len() as u64,
        };
        self.prev = Some(ckpt);
        Ok(staged)
    }
}
