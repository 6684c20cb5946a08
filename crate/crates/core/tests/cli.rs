use std::path::Path;
use std::process::{Command, Output};

fn run(data: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_hitl3d"))
        .args(args)
        .env("MOD_DATA_DIR", data)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

#[test]
fn corpus_to_audit_export() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let gen = tmp.path().join("gen");
    run(&data, &["generate-corpus", "--seed", "7", "--pos", "20", "--neg", "20", "--out", gen.to_str().unwrap()]);
    assert!(gen.join("images/thing-00000-preview.png").exists());

    let out = run(&data, &["ingest", "--corpus", gen.join("corpus.jsonl").to_str().unwrap()]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["created"], 40);
    assert_eq!(report["images"], 40);

    let out = run(&data, &["seed-train", "--pos", "15", "--neg", "15", "--seed", "3", "--epochs", "5"]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["seed"]["model_version"], 1);
    assert!(data.join("model.json").exists());

    // a second ingest of the same corpus reopens the log and changes nothing
    let out = run(&data, &["ingest", "--corpus", gen.join("corpus.jsonl").to_str().unwrap()]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["unchanged"], 40);

    let export = tmp.path().join("audit.jsonl");
    run(&data, &["export-audit", "--out", export.to_str().unwrap()]);
    let kinds: Vec<String> = std::fs::read_to_string(&export)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["kind"].as_str().unwrap().to_owned())
        .collect();
    assert_eq!(kinds[0], "desk_configured");
    assert_eq!(kinds.iter().filter(|k| *k == "document_ingested").count(), 40);
    assert_eq!(kinds.iter().filter(|k| *k == "model_initialized").count(), 1);
}

#[test]
fn simulate_writes_metrics_and_log() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("sim");
    let args =
        ["simulate", "--rounds", "5", "--seed", "9", "--pos", "40", "--neg", "40", "--out", out_dir.to_str().unwrap()];
    run(tmp.path(), &args);
    let first = std::fs::read(out_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(String::from_utf8_lossy(&first).lines().count(), 6);
    let csv = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("round,"));
    let events = hitl3d::moderation::audit::read_file(&out_dir.join("audit.log")).unwrap();
    assert!(hitl3d::moderation::Desk::replay(&events).is_ok());

    run(tmp.path(), &args);
    assert_eq!(std::fs::read(out_dir.join("metrics.jsonl")).unwrap(), first);
}
