//! Asynchronous save pipeline: clients stage compressed checkpoints into a
//! shared slot region, an agent persists them, and recovery picks the newest
//! iteration every rank can load.

pub mod agent;
pub mod client;
pub mod fault;
pub mod recovery;
pub mod scenario;
pub mod slots;

pub use agent::{rank_root, AgentHandle, AgentStatus, PersistAgent};
pub use client::{CheckpointClient, StagedCheckpoint};
pub use fault::{CrashPoint, FaultInjector};
pub use recovery::{
    decide, recover, recover_rank, RankReport, RankView, RecoveryDecision, ReportBarrier,
};
pub use slots::{checksum, RegionGeometry, SlotRegion, SlotState};
