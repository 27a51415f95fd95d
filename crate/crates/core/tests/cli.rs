use std::path::Path;
use std::process::{Command, Output};

use bitsnap::Checkpoint;

fn bitsnap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bitsnap"))
        .args(args)
        .env_remove("MAX_CACHED_ITERATION")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = bitsnap(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn save_load_inspect_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (c0, c1, out, root) = (
        d.join("c0.bsnp"),
        d.join("c1.bsnp"),
        d.join("out.bsnp"),
        d.join("store"),
    );
    ok(&[
        "synth",
        "--output",
        s(&c0),
        "--iter",
        "0",
        "--model",
        "5000,300",
        "--optimizer",
        "800",
        "--seed",
        "4",
    ]);
    ok(&[
        "synth",
        "--output",
        s(&c1),
        "--iter",
        "10",
        "--from",
        s(&c0),
        "--change",
        "0.2",
        "--seed",
        "5",
    ]);
    ok(&["save", "--root", s(&root), "--iter", "0", "--input", s(&c0)]);
    ok(&[
        "save",
        "--root",
        s(&root),
        "--iter",
        "10",
        "--input",
        s(&c1),
    ]);

    ok(&["load", "--root", s(&root), "--output", s(&out)]);
    let want = Checkpoint::read_file(&c1).unwrap();
    let got = Checkpoint::read_file(&out).unwrap();
    assert_eq!(got.iteration, 10);
    assert_eq!(got.model_states, want.model_states);

    ok(&[
        "load",
        "--root",
        s(&root),
        "--iter",
        "0",
        "--output",
        s(&out),
    ]);
    assert_eq!(
        Checkpoint::read_file(&out).unwrap().model_states,
        Checkpoint::read_file(&c0).unwrap().model_states
    );

    let text = ok(&["inspect", "--root", s(&root)]);
    assert!(text.contains("base") && text.contains("delta"), "{text}");
    let json: serde_json::Value =
        serde_json::from_str(&ok(&["inspect", "--root", s(&root), "--json"])).unwrap();
    assert_eq!(json["tracker"]["latest_iteration"], 10);
    assert_eq!(json["checkpoints"].as_array().unwrap().len(), 2);
}

#[test]
fn errors_exit_nonzero_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("empty");
    let out = bitsnap(&[
        "load",
        "--root",
        s(&root),
        "--output",
        s(&dir.path().join("x")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
}

#[test]
fn stage_agent_status_and_recover() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (c0, c1, root, slots) = (
        d.join("c0.bsnp"),
        d.join("c1.bsnp"),
        d.join("store"),
        d.join("slots"),
    );
    ok(&[
        "synth",
        "--output",
        s(&c0),
        "--iter",
        "20",
        "--model",
        "4000",
        "--optimizer",
        "500",
    ]);
    ok(&[
        "synth",
        "--output",
        s(&c1),
        "--iter",
        "40",
        "--from",
        s(&c0),
    ]);
    let region = [
        "--slots-file",
        s(&slots),
        "--ranks",
        "1",
        "--redundancy",
        "2",
        "--slot-capacity",
        "65536",
    ];
    let mut stage0 = vec![
        "stage",
        "--root",
        s(&root),
        "--rank",
        "0",
        "--input",
        s(&c0),
    ];
    stage0.extend(region);
    ok(&stage0);

    let status = ok(&["agent-status", "--slots-file", s(&slots)]);
    assert!(status.contains("VALID"), "{status}");

    let mut agent = vec!["agent", "--root", s(&root), "--once"];
    agent.extend(region);
    ok(&agent);
    let json: serde_json::Value =
        serde_json::from_str(&ok(&["agent-status", "--slots-file", s(&slots), "--json"])).unwrap();
    let states: Vec<&str> = json["slots"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["state"].as_str().unwrap())
        .collect();
    assert!(states.contains(&"PERSISTED"), "{states:?}");
    assert!(root.join("rank_0").join("iter_0000020").is_dir());

    let mut stage1 = vec![
        "stage",
        "--root",
        s(&root),
        "--rank",
        "0",
        "--input",
        s(&c1),
    ];
    stage1.extend(region);
    ok(&stage1);
    let text = ok(&[
        "recover",
        "--root",
        s(&root),
        "--slots-file",
        s(&slots),
        "--ranks",
        "1",
    ]);
    assert!(text.contains("40"), "{text}");
}

#[test]
fn simulate_rank_failure_prints_recovery_trace() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&[
        "simulate-crash",
        "--scenario",
        "fig4",
        "--workdir",
        s(dir.path()),
    ]);
    assert!(
        text.contains("crash rank=1 iteration=100 point=stage-mid-copy"),
        "{text}"
    );
    assert!(text.contains("choose iteration=80"), "{text}");
}

#[test]
fn bench_writes_consistent_json() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (c0, c1, json) = (d.join("c0.bsnp"), d.join("c1.bsnp"), d.join("q.json"));
    ok(&[
        "synth",
        "--output",
        s(&c0),
        "--iter",
        "0",
        "--model",
        "20000",
        "--optimizer",
        "20000",
    ]);
    ok(&[
        "synth",
        "--output",
        s(&c1),
        "--iter",
        "1",
        "--from",
        s(&c0),
        "--change",
        "0.1",
    ]);
    ok(&[
        "bench",
        "--input",
        s(&c1),
        "--prev",
        s(&c0),
        "--weights",
        "0.2,0.4,0.4",
        "--warmups",
        "1",
        "--repetitions",
        "3",
        "--json",
        s(&json),
    ]);
    let report: bitsnap::metrics::QualityReport =
        serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert!(report.is_consistent(1e-12));
    assert_eq!(report.kind, "delta");
    assert!(report.cr_raw > 2.0);
    assert_eq!(report.weights.w1, 0.2);

    let bad = bitsnap(&["bench", "--input", s(&c0), "--weights", "0.5,0.5,0.5"]);
    assert_eq!(bad.status.code(), Some(1));
}
