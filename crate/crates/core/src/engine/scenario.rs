//! Scripted multi-rank runs: the four-rank partial-failure walkthrough and an
//! exhaustive single-crash-point sweep.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;

use super::agent::{rank_root, PersistAgent};
use super::client::CheckpointClient;
use super::fault::{CrashPoint, FaultInjector};
use super::recovery::{recover, recover_rank, RankView, RecoveryDecision, ReportBarrier};
use super::slots::{RegionGeometry, SlotRegion, SlotState};
use crate::error::{Error, Result};
use crate::quant;
use crate::store::StoreConfig;
use crate::synth;
use crate::tensor::Checkpoint;

const MODEL_NUMELS: &[usize] = &[4096, 1000];
const OPTIMIZER_NUMELS: &[usize] = &[2048, 2048];
const SLOT_CAPACITY: u64 = 64 * 1024;
/// Bound on optimizer-state MSE after a reload (8-bit codes on unit-normal data).
const RELOAD_MSE_LIMIT: f64 = 1e-4;

fn fmt_list(v: &[u64]) -> String {
    let items: Vec<String> = v.iter().map(u64::to_string).collect();
    format!("[{}]", items.join(","))
}

fn initial(rank: u32, iteration: u64) -> Checkpoint {
    synth::random_checkpoint(
        iteration,
        MODEL_NUMELS,
        OPTIMIZER_NUMELS,
        1000 + u64::from(rank),
    )
}

fn next(prev: &Checkpoint, rank: u32, iteration: u64) -> Checkpoint {
    synth::mutate(prev, iteration, 0.1, u64::from(rank) << 32 | iteration)
}

fn check_reload(saved: &Checkpoint, loaded: &Checkpoint) -> Result<()> {
    if saved.model_states != loaded.model_states {
        return Err(Error::InvalidCheckpoint(format!(
            "model states of iteration {} differ after reload",
            saved.iteration
        )));
    }
    if saved.optimizer_states.len() != loaded.optimizer_states.len() {
        return Err(Error::StructureMismatch("optimizer tensor count".into()));
    }
    for (a, b) in saved.optimizer_states.iter().zip(&loaded.optimizer_states) {
        let r = quant::precision_report(a, b)?;
        if r.mse > RELOAD_MSE_LIMIT {
            return Err(Error::InvalidCheckpoint(format!(
                "optimizer `{}` MSE {} after reload",
                a.name(),
                r.mse
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct RankFailureResult {
    pub trace: Vec<String>,
    pub decision: RecoveryDecision,
}

/// Four ranks, two slots each, checkpoints at 60, 80 and 100. Rank 1 dies
/// while copying iteration 100 into shared memory after the other ranks
/// have staged and persisted theirs; recovery must settle on 80 and remove
/// every copy of 100.
pub fn run_rank_failure_scenario(workdir: &Path) -> Result<RankFailureResult> {
    const RANKS: u32 = 4;
    const FAILING_RANK: u32 = 1;
    const ITERATIONS: [u64; 3] = [60, 80, 100];
    let failing_iteration = ITERATIONS[2];

    std::fs::create_dir_all(workdir).map_err(|e| Error::io(workdir, e))?;
    let slots_path = workdir.join("slots");
    let geo = RegionGeometry {
        ranks: RANKS,
        slots_per_rank: 2,
        slot_capacity: SLOT_CAPACITY,
    };
    let mut cfg = StoreConfig::new(workdir.join("store"));
    cfg.redundancy = geo.slots_per_rank as usize;
    let mut trace = Vec::new();
    let mut saved: Vec<BTreeMap<u64, Checkpoint>> = vec![BTreeMap::new(); RANKS as usize];

    {
        let region = Arc::new(SlotRegion::create(&slots_path, geo)?);
        let mut agent = PersistAgent::new(region.clone(), &cfg, FaultInjector::new())?;
        let mut clients = (0..RANKS)
            .map(|r| {
                // Rank 1's copy fails on its third stage, iteration 100.
                let faults = if r == FAILING_RANK {
                    FaultInjector::armed(CrashPoint::StageMidCopy, 3)
                } else {
                    FaultInjector::new()
                };
                CheckpointClient::new(
                    r,
                    region.clone(),
                    cfg.max_cached_iteration,
                    cfg.clusters,
                    faults,
                )
            })
            .collect::<Result<Vec<_>>>()?;

        for it in ITERATIONS {
            for (r, client) in clients.iter_mut().enumerate() {
                let ckpt = match saved[r].values().next_back() {
                    None => initial(r as u32, it),
                    Some(prev) => next(prev, r as u32, it),
                };
                match client.save(ckpt.clone()) {
                    Ok(s) => {
                        let evicted = s
                            .receipt
                            .evicted
                            .map(|e| format!(" evicted={e}"))
                            .unwrap_or_default();
                        trace.push(format!(
                            "stage rank={r} iteration={it} kind={} slot={}{evicted}",
                            s.kind.token(),
                            s.receipt.slot
                        ));
                        saved[r].insert(it, ckpt);
                    }
                    Err(Error::InjectedCrash(p)) => {
                        trace.push(format!("crash rank={r} iteration={it} point={p}"));
                    }
                    Err(e) => return Err(e),
                }
            }
            for ev in agent.poll_once()? {
                trace.push(format!(
                    "persist rank={} iteration={}",
                    ev.rank, ev.iteration
                ));
            }
        }
        region.flush()?;
    }

    trace.push("restart".into());
    let region = Arc::new(SlotRegion::open(&slots_path)?);
    let barrier = Arc::new(ReportBarrier::new(RANKS as usize));
    let workers: Vec<_> = (0..RANKS)
        .map(|r| {
            let region = region.clone();
            let barrier = barrier.clone();
            let mut c = cfg.clone();
            c.root = rank_root(&cfg.root, r);
            std::thread::spawn(move || -> Result<_> {
                let mut view = RankView::open(Some(region), r, c)?;
                let outcome = recover_rank(&mut view, &barrier)?;
                Ok((view, outcome))
            })
        })
        .collect();
    let mut views = Vec::new();
    let mut outcomes = Vec::new();
    for w in workers {
        let (view, outcome) = w.join().expect("recovery worker panicked")?;
        views.push(view);
        outcomes.push(outcome);
    }
    let decision = outcomes[0].decision;
    if outcomes.iter().any(|o| o.decision != decision) {
        return Err(Error::InvalidCheckpoint(
            "ranks disagree on recovery".into(),
        ));
    }
    for rep in &outcomes[0].reports {
        let latest = rep
            .latest_valid_iteration
            .map_or("none".to_string(), |i| i.to_string());
        trace.push(format!("report rank={} latest={latest}", rep.rank));
    }
    match decision {
        RecoveryDecision::Resume(it) => trace.push(format!("choose iteration={it}")),
        RecoveryDecision::ColdStart => trace.push("choose cold-start".into()),
    }
    for o in &outcomes {
        let p = &o.pruned[0];
        trace.push(format!(
            "prune rank={} memory={} disk={}",
            p.rank,
            fmt_list(&p.memory),
            fmt_list(&p.disk)
        ));
    }
    if let RecoveryDecision::Resume(chosen) = decision {
        for view in &views {
            let r = view.rank();
            check_reload(&saved[r as usize][&chosen], &view.load(chosen)?)?;
            trace.push(format!("load rank={r} iteration={chosen} ok"));
        }
        let leftover = region
            .slots()
            .iter()
            .any(|s| s.state != SlotState::Empty && s.iteration >= failing_iteration)
            || views
                .iter()
                .any(|v| v.disk_iterations().iter().any(|&i| i > chosen));
        trace.push(format!(
            "verify iteration={failing_iteration} copies={}",
            if leftover { "present" } else { "none" }
        ));
    }
    Ok(RankFailureResult { trace, decision })
}

/// Parameters of the crash-sweep workload.
#[derive(Debug, Clone, Serialize)]
pub struct SweepWorkload {
    pub ranks: u32,
    pub slots_per_rank: u32,
    pub max_cached_iteration: usize,
    pub iterations: Vec<u64>,
}

impl Default for SweepWorkload {
    fn default() -> Self {
        SweepWorkload {
            ranks: 2,
            slots_per_rank: 2,
            max_cached_iteration: 3,
            iterations: (1..=5).collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepCase {
    pub point: CrashPoint,
    pub nth: usize,
    /// Newest iteration staged on every rank before the crash.
    pub expected: Option<u64>,
    pub decision: RecoveryDecision,
    pub error: Option<String>,
}

impl SweepCase {
    pub fn passed(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub workload: SweepWorkload,
    pub hits: Vec<(CrashPoint, usize)>,
    pub cases: Vec<SweepCase>,
}

impl SweepReport {
    pub fn failures(&self) -> impl Iterator<Item = &SweepCase> {
        self.cases.iter().filter(|c| !c.passed())
    }
}

struct WorkloadRun {
    saved: Vec<BTreeMap<u64, Checkpoint>>,
    fully_staged: Option<u64>,
}

fn sweep_config(
    dir: &Path,
    wl: &SweepWorkload,
) -> (std::path::PathBuf, RegionGeometry, StoreConfig) {
    let geo = RegionGeometry {
        ranks: wl.ranks,
        slots_per_rank: wl.slots_per_rank,
        slot_capacity: SLOT_CAPACITY,
    };
    let mut cfg = StoreConfig::new(dir.join("store"));
    cfg.max_cached_iteration = wl.max_cached_iteration;
    cfg.redundancy = wl.slots_per_rank as usize;
    (dir.join("slots"), geo, cfg)
}

/// Stages every iteration on every rank, persisting after each round, until
/// done or an injected crash stops the whole job.
fn run_workload(dir: &Path, wl: &SweepWorkload, faults: &FaultInjector) -> Result<WorkloadRun> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (slots, geo, cfg) = sweep_config(dir, wl);
    let region = Arc::new(SlotRegion::create(&slots, geo)?);
    let mut agent = PersistAgent::new(region.clone(), &cfg, faults.clone())?;
    let mut clients = (0..wl.ranks)
        .map(|r| {
            CheckpointClient::new(
                r,
                region.clone(),
                cfg.max_cached_iteration,
                cfg.clusters,
                faults.clone(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut run = WorkloadRun {
        saved: vec![BTreeMap::new(); wl.ranks as usize],
        fully_staged: None,
    };
    'job: for &it in &wl.iterations {
        for (r, client) in clients.iter_mut().enumerate() {
            let ckpt = match run.saved[r].values().next_back() {
                None => initial(r as u32, it),
                Some(prev) => next(prev, r as u32, it),
            };
            match client.save(ckpt.clone()) {
                Ok(_) => {
                    run.saved[r].insert(it, ckpt);
                }
                Err(e) if e.is_injected_crash() => break 'job,
                Err(e) => return Err(e),
            }
        }
        run.fully_staged = Some(it);
        match agent.poll_once() {
            Ok(_) => {}
            Err(e) if e.is_injected_crash() => break 'job,
            Err(e) => return Err(e),
        }
    }
    region.flush()?;
    Ok(run)
}

/// Restart after the crash: recover, reload on every rank, then resume
/// training for one more checkpoint and recover again.
fn restart_and_check(
    dir: &Path,
    wl: &SweepWorkload,
    run: &WorkloadRun,
) -> Result<RecoveryDecision> {
    let (slots, _, cfg) = sweep_config(dir, wl);
    let region = Arc::new(SlotRegion::open(&slots)?);
    let rank_cfg = |r: u32| {
        let mut c = cfg.clone();
        c.root = rank_root(&cfg.root, r);
        c
    };
    let mut views = (0..wl.ranks)
        .map(|r| RankView::open(Some(region.clone()), r, rank_cfg(r)))
        .collect::<Result<Vec<_>>>()?;
    let outcome = recover(&mut views)?;
    let decision = outcome.decision;
    if decision.iteration() != run.fully_staged {
        return Err(Error::InvalidCheckpoint(format!(
            "recovered {decision:?}, expected {:?}",
            run.fully_staged
        )));
    }
    if let Some(chosen) = decision.iteration() {
        for v in &views {
            check_reload(&run.saved[v.rank() as usize][&chosen], &v.load(chosen)?)?;
        }
    }

    // Training continues from the recovered state.
    let mut agent = PersistAgent::new(region.clone(), &cfg, FaultInjector::new())?;
    agent.poll_once()?;
    let resume_at = wl.iterations.last().copied().unwrap_or(0) + 100;
    let mut resumed = Vec::new();
    for v in &views {
        let r = v.rank();
        let mut client = CheckpointClient::new(
            r,
            region.clone(),
            cfg.max_cached_iteration,
            cfg.clusters,
            FaultInjector::new(),
        )?;
        let ckpt = match decision.iteration() {
            Some(chosen) => {
                client = client.resume(v, chosen)?;
                next(&run.saved[r as usize][&chosen], r, resume_at)
            }
            None => initial(r, resume_at),
        };
        client.save(ckpt.clone())?;
        resumed.push(ckpt);
    }
    agent.poll_once()?;
    let status = agent.status();
    if status.failures > 0 {
        return Err(Error::InvalidCheckpoint(format!(
            "agent failed after resume: {:?}",
            status.last_error
        )));
    }
    drop(views);
    let mut views = (0..wl.ranks)
        .map(|r| RankView::open(None, r, rank_cfg(r)))
        .collect::<Result<Vec<_>>>()?;
    let after = recover(&mut views)?;
    if after.decision != RecoveryDecision::Resume(resume_at) {
        return Err(Error::InvalidCheckpoint(format!(
            "disk-only recovery after resume chose {:?}",
            after.decision
        )));
    }
    for v in &views {
        check_reload(&resumed[v.rank() as usize], &v.load(resume_at)?)?;
    }
    Ok(decision)
}

/// Runs the workload once per (crash point, hit) pair.
pub fn crash_sweep(workdir: &Path, wl: &SweepWorkload) -> Result<SweepReport> {
    std::fs::create_dir_all(workdir).map_err(|e| Error::io(workdir, e))?;
    let counter = FaultInjector::new();
    let dry = workdir.join("dry-run");
    run_workload(&dry, wl, &counter)?;
    let _ = std::fs::remove_dir_all(&dry);
    let hits: Vec<(CrashPoint, usize)> = CrashPoint::ALL
        .iter()
        .map(|&p| (p, counter.hits(p)))
        .collect();

    let mut cases = Vec::new();
    for &(point, n) in &hits {
        for nth in 1..=n {
            let dir = workdir.join(format!("{point}-{nth}"));
            let faults = FaultInjector::armed(point, nth);
            let outcome = run_workload(&dir, wl, &faults).and_then(|run| {
                if faults.fired() != Some(point) {
                    return Err(Error::InvalidCheckpoint(format!(
                        "crash point {point} hit {nth} never fired"
                    )));
                }
                let d = restart_and_check(&dir, wl, &run)?;
                Ok((run.fully_staged, d))
            });
            let case = match outcome {
                Ok((expected, decision)) => SweepCase {
                    point,
                    nth,
                    expected,
                    decision,
                    error: None,
                },
                Err(e) => SweepCase {
                    point,
                    nth,
                    expected: None,
                    decision: RecoveryDecision::ColdStart,
                    error: Some(e.to_string()),
                },
            };
            cases.push(case);
            let _ = std::fs::remove_dir_all(&dir);
        }
    }
    Ok(SweepReport {
        workload: wl.clone(),
        hits,
        cases,
    })
}
