use std::path::Path;
use std::process::{Command, Output};

fn artictts(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_artictts")).args(args).output().expect("binary runs")
}

fn arg(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

#[test]
fn missing_config_is_reported() {
    let out = artictts(&["prepare"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error: --config is required"));
}

#[test]
fn synth_then_run_all_for_one_system() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let out = artictts(&["synth", "--dir", arg(&corpus), "--utterances", "20"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = corpus.join("experiment.cfg");
    assert!(cfg.exists());

    let run = dir.path().join("run");
    let out = artictts(&["run-all", "--config", arg(&cfg), "--system", "txt2wav", "--output", arg(&run), "--workers", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(run.join("eval/report.csv")).unwrap();
    assert_eq!(report.lines().filter(|l| l.contains("txt2wav")).count(), 4);
    // misalignment still runs because the corpus carries ultrasound
    assert!(run.join("misalign/heatmap.ppm").exists());
    let resolved = std::fs::read_to_string(run.join("config.resolved")).unwrap();
    assert!(resolved.contains("workers = 2"));
}

#[test]
fn unknown_system_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c");
    assert!(artictts(&["synth", "--dir", arg(&corpus), "--utterances", "6"]).status.success());
    let out = artictts(&["prepare", "--config", arg(&corpus.join("experiment.cfg")), "--system", "lips2wav"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown system"));
}
