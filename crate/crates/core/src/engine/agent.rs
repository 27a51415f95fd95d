//! Background agent that persists VALID slots through per-rank stores.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::Serialize;

use super::fault::FaultInjector;
use super::slots::{Counter, SlotRegion, SlotState};
use crate::error::{Error, Result};
use crate::store::{CheckpointStore, CommitOutcome, EncodedCheckpoint, StoreConfig};

/// Store root of one rank under the agent's root.
pub fn rank_root(root: &Path, rank: u32) -> PathBuf {
    root.join(format!("rank_{rank}"))
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct AgentStatus {
    pub running: bool,
    pub passes: u64,
    pub persisted: u64,
    pub already_present: u64,
    pub failures: u64,
    pub checksum_failures: u64,
    pub last_error: Option<String>,
    /// Newest iteration persisted by this agent, per rank.
    pub last_persisted: Vec<Option<u64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PersistEvent {
    pub rank: u32,
    pub iteration: u64,
    pub slot: usize,
    pub already_present: bool,
}

pub struct PersistAgent {
    region: Arc<SlotRegion>,
    stores: Vec<CheckpointStore>,
    status: Arc<Mutex<AgentStatus>>,
}

impl PersistAgent {
    /// One store per rank at `rank_root(cfg.root, r)`.
    pub fn new(region: Arc<SlotRegion>, cfg: &StoreConfig, faults: FaultInjector) -> Result<Self> {
        let ranks = region.geometry().ranks;
        let stores = (0..ranks)
            .map(|r| {
                let mut c = cfg.clone();
                c.root = rank_root(&cfg.root, r);
                CheckpointStore::open_with_faults(c, faults.clone())
            })
            .collect::<Result<_>>()?;
        let status = AgentStatus {
            last_persisted: vec![None; ranks as usize],
            ..Default::default()
        };
        Ok(PersistAgent {
            region,
            stores,
            status: Arc::new(Mutex::new(status)),
        })
    }

    pub fn status(&self) -> AgentStatus {
        self.status.lock().unwrap().clone()
    }

    /// Persists every VALID slot, per rank in ascending iteration order.
    ///
    /// Store errors leave the slot VALID for the next pass and skip the rest of
    /// that rank. Only an injected crash aborts the pass.
    pub fn poll_once(&mut self) -> Result<Vec<PersistEvent>> {
        let mut valid: Vec<_> = self
            .region
            .slots()
            .into_iter()
            .filter(|s| s.state == SlotState::Valid)
            .collect();
        valid.sort_by_key(|s| (s.rank, s.iteration));
        let mut events = Vec::new();
        let mut blocked_rank = None;
        for info in valid {
            if blocked_rank == Some(info.rank) {
                continue;
            }
            let Some(store) = self.stores.get_mut(info.rank as usize) else {
                continue;
            };
            let Some((info, payload)) = self.region.read_payload(info.index) else {
                // Published but failing its checksum: unusable.
                self.region.bump(Counter::ChecksumFailure);
                self.region.clear(info.index);
                let mut st = self.status.lock().unwrap();
                st.checksum_failures += 1;
                st.last_error = Some(format!(
                    "slot {} (rank {}, iteration {}) failed its checksum",
                    info.index, info.rank, info.iteration
                ));
                blocked_rank = Some(info.rank);
                continue;
            };
            let outcome = EncodedCheckpoint::from_bytes(&payload).and_then(|enc| {
                if enc.iteration() != info.iteration {
                    return Err(Error::SlotRegion(format!(
                        "slot {} holds iteration {}, header says {}",
                        info.index,
                        enc.iteration(),
                        info.iteration
                    )));
                }
                store.commit(&enc)
            });
            match outcome {
                Ok(o) => {
                    self.region.mark_persisted(info.index, info.iteration);
                    let already_present = o == CommitOutcome::AlreadyPresent;
                    let mut st = self.status.lock().unwrap();
                    if already_present {
                        st.already_present += 1;
                    } else {
                        st.persisted += 1;
                    }
                    st.last_persisted[info.rank as usize] = Some(info.iteration);
                    events.push(PersistEvent {
                        rank: info.rank,
                        iteration: info.iteration,
                        slot: info.index,
                        already_present,
                    });
                }
                Err(e) if e.is_injected_crash() => return Err(e),
                Err(e) => {
                    log::warn!(
                        "persist rank {} iteration {}: {e}",
                        info.rank,
                        info.iteration
                    );
                    self.region.bump(Counter::PersistFailure);
                    let mut st = self.status.lock().unwrap();
                    st.failures += 1;
                    st.last_error = Some(format!(
                        "rank {} iteration {}: {e}",
                        info.rank, info.iteration
                    ));
                    blocked_rank = Some(info.rank);
                }
            }
        }
        self.status.lock().unwrap().passes += 1;
        Ok(events)
    }

    /// Runs `poll_once` every `poll` until stopped or crashed.
    pub fn spawn(mut self, poll: Duration) -> AgentHandle {
        let stop = Arc::new(AtomicBool::new(false));
        let status = self.status.clone();
        status.lock().unwrap().running = true;
        let flag = stop.clone();
        let thread = std::thread::spawn(move || {
            let result = loop {
                if let Err(e) = self.poll_once() {
                    break Err(e);
                }
                if flag.load(Ordering::Acquire) {
                    // One final pass already ran after the stop request.
                    break Ok(());
                }
                std::thread::park_timeout(poll);
            };
            self.status.lock().unwrap().running = false;
            result
        });
        AgentHandle {
            stop,
            status,
            thread: Some(thread),
        }
    }
}

pub struct AgentHandle {
    stop: Arc<AtomicBool>,
    status: Arc<Mutex<AgentStatus>>,
    thread: Option<JoinHandle<Result<()>>>,
}

impl AgentHandle {
    pub fn status(&self) -> AgentStatus {
        self.status.lock().unwrap().clone()
    }

    /// Wakes the agent for an immediate pass.
    pub fn nudge(&self) {
        if let Some(t) = &self.thread {
            t.thread().unpark();
        }
    }

    /// Polls until `done` holds or `timeout` elapses. Returns whether it held.
    pub fn wait_until(
        &self,
        timeout: Duration,
        mut done: impl FnMut(&AgentStatus) -> bool,
    ) -> bool {
        let deadline = std::time::Instant::now() + timeout;
        loop {
            let st = self.status();
            if done(&st) {
                return true;
            }
            if !st.running || std::time::Instant::now() >= deadline {
                return false;
            }
            self.nudge();
            std::thread::sleep(Duration::from_millis(1));
        }
    }

    /// Requests a stop after one more pass and joins the thread.
    pub fn stop(mut self) -> Result<()> {
        self.shutdown()
    }

    fn shutdown(&mut self) -> Result<()> {
        self.stop.store(true, Ordering::Release);
        match self.thread.take() {
            Some(t) => {
                t.thread().unpark();
                t.join().expect("agent thread panicked")
            }
            None => Ok(()),
        }
    }
}

impl Drop for AgentHandle {
    fn drop(&mut self) {
        let _ = self.shutdown();
    }
}
