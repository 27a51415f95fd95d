use std::sync::Arc;
use std::time::Duration;

use bitsnap::engine::slots::EMPTY_CHECKSUM;
use bitsnap::engine::{
    checksum, rank_root, recover, recover_rank, CheckpointClient, CrashPoint, FaultInjector,
    PersistAgent, RankView, RecoveryDecision, RegionGeometry, ReportBarrier, SlotRegion, SlotState,
};
use bitsnap::store::{CheckpointStore, EncodedCheckpoint, StoreConfig};
use bitsnap::{synth, Checkpoint, Error};

const MODEL: &[usize] = &[4096, 1000];
const OPTIM: &[usize] = &[2048];

fn new_region(dir: &std::path::Path, ranks: u32, k: u32) -> Arc<SlotRegion> {
    let geo = RegionGeometry {
        ranks,
        slots_per_rank: k,
        slot_capacity: 64 << 10,
    };
    Arc::new(SlotRegion::create(&dir.join("slots"), geo).unwrap())
}

fn store_cfg(dir: &std::path::Path) -> StoreConfig {
    StoreConfig::new(dir.join("store"))
}

fn client(region: &Arc<SlotRegion>, rank: u32) -> CheckpointClient {
    CheckpointClient::new(rank, region.clone(), 5, 16, FaultInjector::new()).unwrap()
}

fn checkpoints(iterations: &[u64], seed: u64) -> Vec<Checkpoint> {
    let mut out: Vec<Checkpoint> = Vec::new();
    for (i, &it) in iterations.iter().enumerate() {
        let c = match out.last() {
            None => synth::random_checkpoint(it, MODEL, OPTIM, seed),
            Some(p) => synth::mutate(p, it, 0.1, seed + i as u64),
        };
        out.push(c);
    }
    out
}

#[test]
fn staged_slot_is_valid_and_verifies() {
    let dir = tempfile::tempdir().unwrap();
    let region = new_region(dir.path(), 1, 2);
    let mut c = client(&region, 0);
    let staged = c.save(checkpoints(&[10], 1).remove(0)).unwrap();
    let info = region.info(staged.receipt.slot);
    assert_eq!(info.state, SlotState::Valid);
    assert_eq!(info.iteration, 10);
    let (_, payload) = region.read_payload(staged.receipt.slot).unwrap();
    assert_eq!(checksum(&payload), info.checksum);
    assert_eq!(
        EncodedCheckpoint::from_bytes(&payload).unwrap().iteration(),
        10
    );
}

#[test]
fn checksum_is_deterministic_and_bit_sensitive() {
    assert_eq!(checksum(&[]), EMPTY_CHECKSUM);
    let data: Vec<u8> = (0..=255u8).collect();
    assert_eq!(checksum(&data), checksum(&data));
    let mut flipped = data.clone();
    flipped[17] ^= 0xFF;
    assert_ne!(checksum(&data), checksum(&flipped));
}

#[test]
fn corrupted_slot_fails_validation_and_is_not_persisted() {
    let dir = tempfile::tempdir().unwrap();
    let region = new_region(dir.path(), 1, 2);
    let mut c = client(&region, 0);
    let staged = c.save(checkpoints(&[10], 1).remove(0)).unwrap();
    region.corrupt_payload_byte(staged.receipt.slot, 40);
    assert!(region.read_payload(staged.receipt.slot).is_none());
    let mut agent =
        PersistAgent::new(region.clone(), &store_cfg(dir.path()), FaultInjector::new()).unwrap();
    assert!(agent.poll_once().unwrap().is_empty());
    assert!(agent.status().checksum_failures >= 1);
    assert!(!rank_root(&dir.path().join("store"), 0)
        .join("iter_0000010")
        .exists());
}

#[test]
fn agent_persists_staged_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let region = new_region(dir.path(), 1, 2);
    let agent = PersistAgent::new(region.clone(), &store_cfg(dir.path()), FaultInjector::new())
        .unwrap()
        .spawn(Duration::from_millis(5));
    let mut c = client(&region, 0);
    let ckpt = checkpoints(&[10], 1).remove(0);
    let staged = c.save(ckpt.clone()).unwrap();
    agent.nudge();
    assert!(agent.wait_until(Duration::from_secs(20), |s| s.persisted >= 1));
    agent.stop().unwrap();
    assert_eq!(region.info(staged.receipt.slot).state, SlotState::Persisted);
    let root = rank_root(&dir.path().join("store"), 0);
    assert!(root.join("iter_0000010").is_dir());
    let mut cfg = store_cfg(dir.path());
    cfg.root = root;
    let back = CheckpointStore::open(cfg)
        .unwrap()
        .load_checkpoint(None)
        .unwrap();
    assert_eq!(back.model_states, ckpt.model_states);
}

#[test]
fn ring_keeps_k_newest_and_evicts_oldest_persisted() {
    let dir = tempfile::tempdir().unwrap();
    let k = 2;
    let region = new_region(dir.path(), 1, k);
    let mut agent =
        PersistAgent::new(region.clone(), &store_cfg(dir.path()), FaultInjector::new()).unwrap();
    let mut c = client(&region, 0);
    let mut evicted = Vec::new();
    for ckpt in checkpoints(&[10, 20, 30], 4) {
        let s = c.save(ckpt).unwrap();
        evicted.extend(s.receipt.evicted);
        agent.poll_once().unwrap();
    }
    assert_eq!(evicted, vec![10]);
    let mut held: Vec<u64> = region
        .rank_slots(0)
        .map(|i| region.info(i))
        .filter(|s| s.state != SlotState::Empty)
        .map(|s| s.iteration)
        .collect();
    held.sort_unstable();
    assert_eq!(held, vec![20, 30]);
}

#[test]
fn full_ring_of_unpersisted_slots_signals_backpressure() {
    let dir = tempfile::tempdir().unwrap();
    let region = new_region(dir.path(), 1, 2);
    let mut c = client(&region, 0);
    let cks = checkpoints(&[10, 20, 30], 4);
    c.save(cks[0].clone()).unwrap();
    c.save(cks[1].clone()).unwrap();
    assert!(matches!(
        c.save(cks[2].clone()),
        Err(Error::Backpressure { rank: 0 })
    ));
    assert_eq!(region.counters().backpressure, 1);
    // Neither VALID slot was touched.
    let states: Vec<_> = region
        .slots()
        .iter()
        .map(|s| (s.iteration, s.state))
        .collect();
    assert_eq!(states, vec![(10, SlotState::Valid), (20, SlotState::Valid)]);
}

#[test]
fn stale_iteration_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let region = new_region(dir.path(), 1, 2);
    let payload = b"x".repeat(10);
    region
        .stage(0, 20, &payload, &FaultInjector::new())
        .unwrap();
    assert!(matches!(
        region.stage(0, 20, &payload, &FaultInjector::new()),
        Err(Error::StaleIteration {
            iteration: 20,
            newest: 20
        })
    ));
}

#[test]
fn killed_agent_restarts_and_finishes_persisting() {
    for point in [
        CrashPoint::PersistAfterTensors,
        CrashPoint::PersistAfterDirRename,
        CrashPoint::TrackerAfterTempWrite,
        CrashPoint::TrackerAfterRename,
    ] {
        let dir = tempfile::tempdir().unwrap();
        let region = new_region(dir.path(), 1, 2);
        let mut c = client(&region, 0);
        let cks = checkpoints(&[10, 20], 3);
        c.save(cks[0].clone()).unwrap();
        c.save(cks[1].clone()).unwrap();
        let mut dying = PersistAgent::new(
            region.clone(),
            &store_cfg(dir.path()),
            FaultInjector::armed(point, 2),
        )
        .unwrap();
        assert!(matches!(dying.poll_once(), Err(Error::InjectedCrash(p)) if p == point));
        drop(dying);

        let mut agent =
            PersistAgent::new(region.clone(), &store_cfg(dir.path()), FaultInjector::new())
                .unwrap();
        agent.poll_once().unwrap();
        assert!(
            region
                .slots()
                .iter()
                .all(|s| s.state == SlotState::Persisted),
            "{point}"
        );
        let mut cfg = store_cfg(dir.path());
        cfg.root = rank_root(&cfg.root, 0);
        let store = CheckpointStore::open(cfg).unwrap();
        assert_eq!(
            store.committed_iterations().unwrap(),
            vec![10, 20],
            "{point}"
        );
        for ck in &cks {
            let back = store.load_checkpoint(Some(ck.iteration)).unwrap();
            assert_eq!(back.model_states, ck.model_states, "{point}");
        }
    }
}

#[test]
fn concurrent_ranks_are_both_persisted() {
    let dir = tempfile::tempdir().unwrap();
    let region = new_region(dir.path(), 2, 2);
    let agent = PersistAgent::new(region.clone(), &store_cfg(dir.path()), FaultInjector::new())
        .unwrap()
        .spawn(Duration::from_millis(1));
    let producers: Vec<_> = (0..2u32)
        .map(|rank| {
            let region = region.clone();
            std::thread::spawn(move || {
                let mut c = client(&region, rank);
                let cks = checkpoints(&[10, 20, 30, 40], 100 + u64::from(rank));
                for ck in &cks {
                    loop {
                        match c.save(ck.clone()) {
                            Ok(_) => break,
                            Err(Error::Backpressure { .. }) => {
                                std::thread::sleep(Duration::from_millis(2))
                            }
                            Err(e) => panic!("{e}"),
                        }
                    }
                }
                cks
            })
        })
        .collect();
    let saved: Vec<Vec<Checkpoint>> = producers.into_iter().map(|h| h.join().unwrap()).collect();
    agent.nudge();
    assert!(agent.wait_until(Duration::from_secs(30), |s| s.persisted >= 8));
    agent.stop().unwrap();
    for (rank, cks) in saved.iter().enumerate() {
        let mut cfg = store_cfg(dir.path());
        cfg.root = rank_root(&cfg.root, rank as u32);
        let store = CheckpointStore::open(cfg).unwrap();
        for ck in cks {
            assert_eq!(
                store
                    .load_checkpoint(Some(ck.iteration))
                    .unwrap()
                    .model_states,
                ck.model_states
            );
        }
    }
}

#[test]
fn redundancy_bound_on_staged_memory() {
    let dir = tempfile::tempdir().unwrap();
    let k = 2u32;
    let region = new_region(dir.path(), 1, k);
    let mut agent =
        PersistAgent::new(region.clone(), &store_cfg(dir.path()), FaultInjector::new()).unwrap();
    let mut c = client(&region, 0);
    let mut largest = 0u64;
    for ck in checkpoints(&[10, 20, 30, 40, 50, 60, 70], 8) {
        largest = largest.max(c.save(ck).unwrap().bytes);
        assert!(region.staged_bytes(0) <= u64::from(k) * largest);
        agent.poll_once().unwrap();
    }

    // Unchanged model states: every staged delta is within the codec bound.
    let dir = tempfile::tempdir().unwrap();
    let region = new_region(dir.path(), 1, k);
    let mut agent =
        PersistAgent::new(region.clone(), &store_cfg(dir.path()), FaultInjector::new()).unwrap();
    let mut c = client(&region, 0);
    let first = synth::random_checkpoint(0, MODEL, OPTIM, 3);
    c.save(first.clone()).unwrap();
    agent.poll_once().unwrap();
    let model_raw: u64 = MODEL.iter().map(|&n| 2 * n as u64).sum();
    let optim_raw: u64 = OPTIM.iter().map(|&n| 4 * n as u64).sum();
    let headers = 4096.0;
    let bound = f64::from(k) * (model_raw as f64 / 16.0 + optim_raw as f64 / 2.67) + headers;
    for it in 1..=4 {
        let mut ck = synth::mutate(&first, it, 0.0, it);
        ck.model_states = first.model_states.clone();
        c.save(ck).unwrap();
        agent.poll_once().unwrap();
    }
    assert!(
        (region.staged_bytes(0) as f64) <= bound,
        "{} > {bound}",
        region.staged_bytes(0)
    );
}

#[test]
fn recovery_with_all_ranks_current_resumes_latest() {
    let dir = tempfile::tempdir().unwrap();
    let region = new_region(dir.path(), 2, 2);
    let cks = checkpoints(&[80, 100], 6);
    for rank in 0..2 {
        let mut c = client(&region, rank);
        for ck in &cks {
            c.save(ck.clone()).unwrap();
        }
    }
    let mut views: Vec<RankView> = (0..2)
        .map(|r| {
            let mut cfg = store_cfg(dir.path());
            cfg.root = rank_root(&cfg.root, r);
            RankView::open(Some(region.clone()), r, cfg).unwrap()
        })
        .collect();
    let out = recover(&mut views).unwrap();
    assert_eq!(out.decision, RecoveryDecision::Resume(100));
    for v in &views {
        assert_eq!(v.load(100).unwrap().model_states, cks[1].model_states);
    }
}

#[test]
fn rank_without_copies_forces_cold_start_and_wipe() {
    let dir = tempfile::tempdir().unwrap();
    let region = new_region(dir.path(), 3, 2);
    let ck = checkpoints(&[100], 6).remove(0);
    for rank in [0, 1] {
        client(&region, rank).save(ck.clone()).unwrap();
    }
    let barrier = Arc::new(ReportBarrier::new(3));
    let handles: Vec<_> = (0..3u32)
        .map(|r| {
            let region = region.clone();
            let barrier = barrier.clone();
            let mut cfg = store_cfg(dir.path());
            cfg.root = rank_root(&cfg.root, r);
            std::thread::spawn(move || {
                let mut view = RankView::open(Some(region), r, cfg).unwrap();
                let out = recover_rank(&mut view, &barrier).unwrap();
                (out.decision, view.memory_iterations())
            })
        })
        .collect();
    for h in handles {
        let (decision, memory) = h.join().unwrap();
        assert_eq!(decision, RecoveryDecision::ColdStart);
        assert!(memory.is_empty());
    }
    assert!(region.slots().iter().all(|s| s.state == SlotState::Empty));
}

#[test]
fn recovery_uses_disk_when_memory_is_gone() {
    let dir = tempfile::tempdir().unwrap();
    let region = new_region(dir.path(), 1, 2);
    let mut agent =
        PersistAgent::new(region.clone(), &store_cfg(dir.path()), FaultInjector::new()).unwrap();
    let cks = checkpoints(&[10, 20, 30], 2);
    let mut c = client(&region, 0);
    for ck in &cks {
        c.save(ck.clone()).unwrap();
        agent.poll_once().unwrap();
    }
    let mut cfg = store_cfg(dir.path());
    cfg.root = rank_root(&cfg.root, 0);
    let mut views = vec![RankView::open(None, 0, cfg).unwrap()];
    assert_eq!(
        recover(&mut views).unwrap().decision,
        RecoveryDecision::Resume(30)
    );
    assert_eq!(views[0].load(10).unwrap().model_states, cks[0].model_states);
}
