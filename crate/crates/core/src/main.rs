use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::{Parser, Subcommand, ValueEnum};

use bitsnap::engine::scenario::{self, SweepWorkload};
use bitsnap::engine::{
    rank_root, recover, CheckpointClient, FaultInjector, PersistAgent, RankView, RecoveryDecision,
    RegionGeometry, SlotRegion,
};
use bitsnap::metrics::{self, BenchOptions, NormalizationBounds, QualityWeights, Timing};
use bitsnap::store::{CheckpointKind, CheckpointStore, StoreConfig};
use bitsnap::{synth, Checkpoint, Error, Result};

const DEFAULT_SLOT_CAPACITY: u64 = 16 << 20;

#[derive(Parser)]
#[command(
    name = "bitsnap",
    version,
    about = "Compressed, crash-consistent training checkpoints"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct StoreArgs {
    /// Store root directory.
    #[arg(long)]
    root: PathBuf,
    /// Checkpoints per base/delta chain (MAX_CACHED_ITERATION overrides).
    #[arg(long, default_value_t = 5)]
    max_cached: usize,
    /// Quantizer cluster count for optimizer states.
    #[arg(long, default_value_t = 16)]
    clusters: usize,
}

impl StoreArgs {
    fn config(&self) -> Result<StoreConfig> {
        let mut cfg = StoreConfig::new(&self.root);
        cfg.max_cached_iteration = self.max_cached;
        cfg.clusters = self.clusters;
        cfg.with_env_override()
    }
}

#[derive(clap::Args, Clone)]
struct RegionArgs {
    /// Memory-mapped slot file.
    #[arg(long)]
    slots_file: PathBuf,
    #[arg(long, default_value_t = 1)]
    ranks: u32,
    /// Slots kept per rank.
    #[arg(long, default_value_t = 2)]
    redundancy: u32,
    #[arg(long, default_value_t = DEFAULT_SLOT_CAPACITY)]
    slot_capacity: u64,
}

impl RegionArgs {
    fn open(&self) -> Result<SlotRegion> {
        SlotRegion::open_or_create(
            &self.slots_file,
            RegionGeometry {
                ranks: self.ranks,
                slots_per_rank: self.redundancy,
                slot_capacity: self.slot_capacity,
            },
        )
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioName {
    /// Four ranks, rank 1 fails while staging iteration 100.
    Fig4,
    /// Every single crash point across stage, persist and tracker commit.
    Sweep,
}

#[derive(Subcommand)]
enum Command {
    /// Compress and commit a checkpoint file.
    Save {
        #[command(flatten)]
        store: StoreArgs,
        #[arg(long)]
        iter: u64,
        #[arg(long)]
        input: PathBuf,
    },
    /// Reconstruct a checkpoint (latest by default) into a file.
    Load {
        #[command(flatten)]
        store: StoreArgs,
        #[arg(long)]
        iter: Option<u64>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Show the tracker and every checkpoint manifest.
    Inspect {
        #[command(flatten)]
        store: StoreArgs,
        #[arg(long)]
        json: bool,
    },
    /// Write a random checkpoint file, optionally derived from another.
    Synth {
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        iter: u64,
        /// Element counts of the F16 model tensors.
        #[arg(long, value_delimiter = ',', default_value = "65536")]
        model: Vec<usize>,
        /// Element counts of the F32 optimizer tensors.
        #[arg(long, value_delimiter = ',', default_value = "65536")]
        optimizer: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Derive from this checkpoint instead of drawing fresh tensors.
        #[arg(long)]
        from: Option<PathBuf>,
        /// Fraction of model elements changed relative to --from.
        #[arg(long, default_value_t = 0.15)]
        change: f64,
    },
    /// Compress a checkpoint and stage it into a rank's memory slots.
    Stage {
        #[command(flatten)]
        store: StoreArgs,
        #[command(flatten)]
        region: RegionArgs,
        #[arg(long)]
        rank: u32,
        #[arg(long)]
        input: PathBuf,
        /// Overrides the iteration recorded in the input file.
        #[arg(long)]
        iter: Option<u64>,
    },
    /// Persist staged checkpoints to per-rank stores.
    Agent {
        #[command(flatten)]
        store: StoreArgs,
        #[command(flatten)]
        region: RegionArgs,
        /// Run a single pass and exit.
        #[arg(long)]
        once: bool,
        #[arg(long, default_value_t = 50)]
        poll_ms: u64,
        /// Exit after this long; runs until killed otherwise.
        #[arg(long)]
        duration_ms: Option<u64>,
    },
    /// Print slot states and error counters.
    AgentStatus {
        #[arg(long)]
        slots_file: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Agree on the newest iteration every rank can load and prune newer copies.
    Recover {
        #[command(flatten)]
        store: StoreArgs,
        /// Slot file to include; disk only when absent.
        #[arg(long)]
        slots_file: Option<PathBuf>,
        #[arg(long)]
        ranks: u32,
    },
    /// Run a scripted failure scenario and print its trace.
    SimulateCrash {
        #[arg(long, value_enum)]
        scenario: ScenarioName,
        /// Working directory (a temporary one by default).
        #[arg(long)]
        workdir: Option<PathBuf>,
    },
    /// Measure ratio, codec time and precision, and combine them into q.
    Bench {
        #[arg(long)]
        input: PathBuf,
        /// Previous checkpoint; model states are delta-encoded against it.
        #[arg(long)]
        prev: Option<PathBuf>,
        /// w1,w2,w3 for ratio, speed and precision.
        #[arg(
            long,
            default_value = "0.3333333333333333,0.3333333333333333,0.3333333333333334"
        )]
        weights: String,
        /// cr_min,cr_max,cs_min,cs_max,ps_min,ps_max
        #[arg(long)]
        bounds: Option<String>,
        #[arg(long, default_value_t = 5)]
        warmups: usize,
        #[arg(long, default_value_t = 20)]
        repetitions: usize,
        #[arg(long, default_value_t = 16)]
        clusters: usize,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn with_workdir<T>(workdir: Option<PathBuf>, f: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    match workdir {
        Some(d) => f(&d),
        None => {
            let tmp = std::env::temp_dir().join(format!("bitsnap-sim-{}", std::process::id()));
            let out = f(&tmp);
            let _ = std::fs::remove_dir_all(&tmp);
            out
        }
    }
}

fn rank_config(cfg: &StoreConfig, rank: u32) -> StoreConfig {
    let mut c = cfg.clone();
    c.root = rank_root(&cfg.root, rank);
    c
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Save { store, iter, input } => {
            let mut s = CheckpointStore::open(store.config()?)?;
            let mut ckpt = Checkpoint::read_file(&input)?;
            ckpt.iteration = iter;
            let prev = match s.plan(iter)?.kind {
                CheckpointKind::Delta => Some(s.load_checkpoint(None)?),
                CheckpointKind::Base => None,
            };
            let m = s.save_checkpoint(&ckpt, prev.as_ref())?;
            let bytes: u64 = m.entries.iter().map(|e| e.length).sum();
            println!(
                "saved iteration {} as {} (base {}), {} tensors, {} bytes",
                m.iteration,
                m.kind.token(),
                m.base_iteration,
                m.entries.len(),
                bytes
            );
        }
        Command::Load {
            store,
            iter,
            output,
        } => {
            let s = CheckpointStore::open(store.config()?)?;
            let ckpt = s.load_checkpoint(iter)?;
            ckpt.write_file(&output)?;
            println!(
                "loaded iteration {} into {}",
                ckpt.iteration,
                output.display()
            );
        }
        Command::Inspect { store, json } => {
            let s = CheckpointStore::open(store.config()?)?;
            let summary = s.inspect()?;
            if json {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&summary).expect("serializable")
                );
                return Ok(());
            }
            match summary.tracker {
                Some(t) => println!(
                    "tracker: latest {} base {}",
                    t.latest_iteration, t.latest_base_iteration
                ),
                None => println!("tracker: none"),
            }
            for m in &summary.checkpoints {
                let parent = m
                    .parent_iteration
                    .map_or("-".to_string(), |p| p.to_string());
                println!(
                    "iteration {:>7}  {:<5}  base {:>7}  parent {:>7}  {} bytes",
                    m.iteration,
                    m.kind.token(),
                    m.base_iteration,
                    parent,
                    m.tensors_len()
                );
                for e in &m.entries {
                    println!(
                        "    {:<9} {:<5} {:>12} bytes  {}",
                        format!("{:?}", e.section).to_lowercase(),
                        format!("{:?}", e.codec).to_lowercase(),
                        e.length,
                        e.name
                    );
                }
            }
            for o in &summary.orphans {
                println!("orphan: {o}");
            }
        }
        Command::Synth {
            output,
            iter,
            model,
            optimizer,
            seed,
            from,
            change,
        } => {
            let ckpt = match from {
                Some(p) => synth::mutate(&Checkpoint::read_file(&p)?, iter, change, seed),
                None => synth::random_checkpoint(iter, &model, &optimizer, seed),
            };
            ckpt.write_file(&output)?;
            println!(
                "wrote iteration {} ({} model bytes, {} optimizer bytes) to {}",
                iter,
                ckpt.model_bytes(),
                ckpt.optimizer_bytes(),
                output.display()
            );
        }
        Command::Stage {
            store,
            region,
            rank,
            input,
            iter,
        } => {
            let cfg = store.config()?;
            let region = Arc::new(region.open()?);
            let mut ckpt = Checkpoint::read_file(&input)?;
            if let Some(it) = iter {
                ckpt.iteration = it;
            }
            let view = RankView::open(Some(region.clone()), rank, rank_config(&cfg, rank))?;
            let mut client = CheckpointClient::new(
                rank,
                region.clone(),
                cfg.max_cached_iteration,
                cfg.clusters,
                FaultInjector::new(),
            )?;
            if let Some(latest) = view.report().latest_valid_iteration {
                client = client.resume(&view, latest)?;
            }
            let t = Instant::now();
            let s = client.save(ckpt)?;
            region.flush()?;
            println!(
                "staged rank {rank} iteration {} as {} in slot {} ({} bytes, {:.3} ms){}",
                s.iteration,
                s.kind.token(),
                s.receipt.slot,
                s.bytes,
                t.elapsed().as_secs_f64() * 1e3,
                s.receipt
                    .evicted
                    .map(|e| format!(", evicted {e}"))
                    .unwrap_or_default()
            );
        }
        Command::Agent {
            store,
            region,
            once,
            poll_ms,
            duration_ms,
        } => {
            let cfg = store.config()?;
            let region = Arc::new(region.open()?);
            let mut agent = PersistAgent::new(region.clone(), &cfg, FaultInjector::new())?;
            let deadline = duration_ms.map(|ms| Instant::now() + Duration::from_millis(ms));
            loop {
                for ev in agent.poll_once()? {
                    println!(
                        "persisted rank {} iteration {}{}",
                        ev.rank,
                        ev.iteration,
                        if ev.already_present {
                            " (already on disk)"
                        } else {
                            ""
                        }
                    );
                }
                region.flush()?;
                if once || deadline.is_some_and(|d| Instant::now() >= d) {
                    break;
                }
                std::thread::sleep(Duration::from_millis(poll_ms));
            }
            let st = agent.status();
            if let Some(e) = &st.last_error {
                eprintln!("last error: {e}");
            }
            println!(
                "agent: {} persisted, {} already present, {} failures",
                st.persisted, st.already_present, st.failures
            );
        }
        Command::AgentStatus { slots_file, json } => {
            let region = SlotRegion::open(&slots_file)?;
            if json {
                #[derive(serde::Serialize)]
                struct Status {
                    geometry: RegionGeometry,
                    counters: bitsnap::engine::slots::RegionCounters,
                    slots: Vec<bitsnap::engine::slots::SlotInfo>,
                }
                let s = Status {
                    geometry: region.geometry(),
                    counters: region.counters(),
                    slots: region.slots(),
                };
                println!(
                    "{}",
                    serde_json::to_string_pretty(&s).expect("serializable")
                );
            } else {
                print!("{}", region.report());
            }
        }
        Command::Recover {
            store,
            slots_file,
            ranks,
        } => {
            let cfg = store.config()?;
            let region = match slots_file {
                Some(p) => Some(Arc::new(SlotRegion::open(&p)?)),
                None => None,
            };
            let mut views = (0..ranks)
                .map(|r| RankView::open(region.clone(), r, rank_config(&cfg, r)))
                .collect::<Result<Vec<_>>>()?;
            let out = recover(&mut views)?;
            for r in &out.reports {
                println!(
                    "report rank={} latest={}",
                    r.rank,
                    r.latest_valid_iteration
                        .map_or("none".to_string(), |i| i.to_string())
                );
            }
            match out.decision {
                RecoveryDecision::Resume(it) => println!("choose iteration={it}"),
                RecoveryDecision::ColdStart => println!("choose cold-start"),
            }
            for p in &out.pruned {
                println!(
                    "prune rank={} memory={:?} disk={:?}",
                    p.rank, p.memory, p.disk
                );
            }
        }
        Command::SimulateCrash { scenario, workdir } => match scenario {
            ScenarioName::Fig4 => {
                let r = with_workdir(workdir, scenario::run_rank_failure_scenario)?;
                for line in &r.trace {
                    println!("{line}");
                }
            }
            ScenarioName::Sweep => {
                let r = with_workdir(workdir, |d| {
                    scenario::crash_sweep(d, &SweepWorkload::default())
                })?;
                for c in &r.cases {
                    println!(
                        "{:<26} hit {:>2}: {}",
                        c.point.label(),
                        c.nth,
                        match (&c.error, c.decision) {
                            (Some(e), _) => format!("FAIL {e}"),
                            (None, RecoveryDecision::Resume(it)) => format!("resumed at {it}"),
                            (None, RecoveryDecision::ColdStart) => "cold start".into(),
                        }
                    );
                }
                let failed = r.failures().count();
                println!("{} cases, {} failed", r.cases.len(), failed);
                if failed > 0 {
                    return Err(Error::InvalidCheckpoint(format!(
                        "{failed} sweep cases failed"
                    )));
                }
            }
        },
        Command::Bench {
            input,
            prev,
            weights,
            bounds,
            warmups,
            repetitions,
            clusters,
            json,
        } => {
            let ckpt = Checkpoint::read_file(&input)?;
            let prev = prev.map(|p| Checkpoint::read_file(&p)).transpose()?;
            let opts = BenchOptions {
                weights: QualityWeights::parse(&weights)?,
                bounds: match bounds {
                    Some(b) => NormalizationBounds::parse(&b)?,
                    None => NormalizationBounds::default(),
                },
                timing: Timing {
                    warmups,
                    repetitions,
                },
                clusters,
            };
            let r = metrics::measure(&ckpt, prev.as_ref(), &opts)?;
            println!(
                "{}: ratio {:.3}, codec {:.6} s over baseline, mse {:.3e}",
                r.kind, r.cr_raw, r.cs_raw, r.ps_raw
            );
            println!(
                "scores: cr {:.4}, cs {:.4}, ps {:.4}, q {:.6}",
                r.cr, r.cs, r.ps, r.q
            );
            if let Some(p) = json {
                write_json(&p, &r)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
