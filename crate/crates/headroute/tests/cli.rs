use std::path::Path;
use std::process::{Command, Output};

use headroute::json::{read_assignment, read_jsonl, ClipMetrics};
use headroute_core::cost::CostReport;
use headroute_core::degrade::DegradationTrace;
use headroute_core::Pattern;

fn headroute(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_headroute")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = headroute(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// A model small enough that every subcommand runs in well under a second.
fn write_config(dir: &Path) -> String {
    let path = dir.join("config.json");
    std::fs::write(
        &path,
        r#"{
  "version": 1,
  "model": {"layers": 1, "heads": 2, "head_dim": 4, "factor": 2, "grid": {"frames": 2, "height": 4, "width": 4}, "time_freqs": 4},
  "train": {"schedule": [{"stage": "S1", "iterations": 2}, {"stage": "S2", "iterations": 2}], "batch_size": 1, "calibration_count": 2, "window": [1, 3, 3]},
  "eval": {"count": 2}
}"#,
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn data_degrade_profile_route() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d);
    let data = d.join("data");
    ok(&["gen-data", "--config", &cfg, "--out-dir", data.to_str().unwrap(), "--count", "2"]);
    let clip = data.join("clip_0000.ovid");
    assert!(data.join("clip_0001.oflw").exists());

    let lq = d.join("lq.ovid");
    let trace = d.join("trace.json");
    ok(&[
        "degrade", "--input", clip.to_str().unwrap(), "--out", lq.to_str().unwrap(), "--stage", "s2",
        "--p", "1.0", "--seed", "4", "--trace", trace.to_str().unwrap(),
    ]);
    let t: DegradationTrace = headroute::json::read_json(&trace).unwrap();
    assert_eq!(t.frames.len(), 2);
    assert_ne!(t.frames[0], t.frames[1]);

    let a1 = d.join("a1.json");
    ok(&["profile", "--config", &cfg, "--rho", "0.5", "--out", a1.to_str().unwrap()]);
    let map = read_assignment(&a1).unwrap();
    assert_eq!(map.count(Pattern::Global), 1);
    let again = ok(&["profile", "--config", &cfg, "--rho", "0.5"]);
    assert_eq!(std::fs::read(&a1).unwrap(), again.stdout);

    let a2 = d.join("a2.json");
    ok(&["route", "--assignment", a1.to_str().unwrap(), "--rho", "1.0", "--out", a2.to_str().unwrap()]);
    let rerouted = read_assignment(&a2).unwrap();
    assert_eq!(rerouted.count(Pattern::Global), 2);
    assert_eq!(rerouted.scores(), map.scores());
}

#[test]
fn train_resume_infer_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d);
    let run = d.join("run");
    let run_s = run.to_str().unwrap();
    ok(&["train", "--config", &cfg, "--out-dir", run_s, "--max-steps", "3"]);
    let ckpt = run.join("model.odit");
    let ckpt_s = ckpt.to_str().unwrap();
    ok(&["train", "--config", &cfg, "--out-dir", run_s, "--resume", ckpt_s]);
    let log = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 4, "{log}");

    let full = d.join("full");
    ok(&["train", "--config", &cfg, "--out-dir", full.to_str().unwrap()]);
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(full.join("model.odit")).unwrap());

    let assignment = run.join("assignment.json");
    let a_s = assignment.to_str().unwrap();
    let metrics = d.join("metrics.jsonl");
    ok(&["eval", "--config", &cfg, "--checkpoint", ckpt_s, "--assignment", a_s, "--out", metrics.to_str().unwrap()]);
    let rows: Vec<ClipMetrics> = read_jsonl(&metrics).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.psnr.is_finite() && r.total >= 0.0));

    let data = d.join("data");
    ok(&["gen-data", "--config", &cfg, "--out-dir", data.to_str().unwrap(), "--count", "1"]);
    let restored = d.join("restored.ovid");
    ok(&[
        "infer", "--checkpoint", ckpt_s, "--assignment", a_s, "--input",
        data.join("clip_0000.ovid").to_str().unwrap(), "--out", restored.to_str().unwrap(),
    ]);
    let clip = headroute::formats::read_clip(&restored).unwrap();
    assert_eq!(clip.dims(), (3, 2, 8, 8));
}

/// Re-routing at the stage boundary survives a checkpoint taken exactly there.
#[test]
fn reprofiled_resume_matches_a_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d);
    let text = std::fs::read_to_string(&cfg).unwrap().replace(r#""window": [1, 3, 3]}"#, r#""window": [1, 3, 3], "reprofile": true}"#);
    assert!(text.contains("reprofile"));
    std::fs::write(&cfg, text).unwrap();
    let (split, full) = (d.join("split"), d.join("full"));
    ok(&["train", "--config", &cfg, "--out-dir", split.to_str().unwrap(), "--max-steps", "2"]);
    let ckpt = split.join("model.odit");
    ok(&["train", "--config", &cfg, "--out-dir", split.to_str().unwrap(), "--resume", ckpt.to_str().unwrap()]);
    ok(&["train", "--config", &cfg, "--out-dir", full.to_str().unwrap()]);
    for f in ["model.odit", "assignment.json", "loss.csv"] {
        assert_eq!(std::fs::read(split.join(f)).unwrap(), std::fs::read(full.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn macs_bench_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d);
    let out = ok(&["macs", "--config", &cfg]);
    let report: CostReport = serde_json::from_slice(&out.stdout).unwrap();
    report_is_consistent(&report);

    let table = ok(&["bench", "--grid", "2,4,4", "--head-dim", "4", "--repeats", "5"]);
    let text = String::from_utf8(table.stdout).unwrap();
    assert_eq!(text.lines().count(), 4, "{text}");
    assert!(text.contains("window(3,5,5)"));

    let csv = d.join("sweep.csv");
    ok(&["sweep-rho", "--config", &cfg, "--out", csv.to_str().unwrap(), "0.0", "0.5", "1.0"]);
    let mut r = csv::Reader::from_path(&csv).unwrap();
    let headers = r.headers().unwrap().clone();
    assert!(headers.iter().any(|h| h == "psnr") && headers.iter().any(|h| h == "warp_error"));
    let rows: Vec<_> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3);
    let macs: Vec<u64> = rows.iter().map(|row| row[2].parse().unwrap()).collect();
    assert!(macs[0] <= macs[1] && macs[1] <= macs[2], "{macs:?}");
}

fn report_is_consistent(r: &CostReport) {
    r.check_totals().unwrap();
    assert_eq!(r.tokens, 32);
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let bad = d.join("bad.json");
    std::fs::write(&bad, r#"{"version": 1, "modle": {}}"#).unwrap();
    let out = headroute(&["macs", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let diag: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(diag["exit_code"], 2);

    let out = headroute(&["macs", "--rho", "1.5"]);
    assert_eq!(out.status.code(), Some(2));

    let out = headroute(&["infer", "--checkpoint", "/nonexistent.odit", "--assignment", "a", "--input", "b", "--out", "c"]);
    assert_eq!(out.status.code(), Some(1));

    let out = headroute(&["bench", "--window", "2,5,5"]);
    assert_eq!(out.status.code(), Some(2));

    let garbage = d.join("garbage.ovid");
    std::fs::write(&garbage, b"NOPE\x01").unwrap();
    let out = headroute(&["degrade", "--input", garbage.to_str().unwrap(), "--out", "x.ovid"]);
    assert_eq!(out.status.code(), Some(2));

    assert_eq!(headroute(&["no-such-command"]).status.code(), Some(2));

    // a learning rate this large overflows the weights after one step
    let cfg = write_config(d);
    let out = headroute(&["train", "--config", &cfg, "--out-dir", d.join("run").to_str().unwrap(), "--lr", "1e300"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
