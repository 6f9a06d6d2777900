use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gres::cli::Manifest;
use gres::verify::micro_config;

fn gres(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("micro.toml");
    if !cfg.exists() {
        fs::write(&cfg, micro_config().to_toml().unwrap()).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_gres"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn stages_run_in_order_and_write_manifests() {
    let dir = tempfile::tempdir().unwrap();
    ok(&gres(dir.path(), &["gen-data"]));
    ok(&gres(dir.path(), &["build-graphs"]));
    ok(&gres(dir.path(), &["train"]));
    let report = ok(&gres(dir.path(), &["evaluate"]));
    assert!(report.contains("HR") && report.contains("popularity baseline"));

    let out = dir.path().join("out");
    for f in ["graphs/split.json", "graphs/hg_edges.csv", "graphs/sequences.jsonl", "graphs/tg/user_0.csv", "model/params.bin", "model/history.csv", "reports/metrics.csv"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let m: Manifest = serde_json::from_str(&fs::read_to_string(out.join("model/manifest.json")).unwrap()).unwrap();
    assert_eq!(m.stage, "model");
    assert!(m.inputs.contains_key("data/interactions.jsonl"));
    assert_eq!(m.outputs["model/params.bin"], gres::cli::file_hash(&out.join("model/params.bin")).unwrap());

    let csv = fs::read_to_string(out.join("reports/metrics.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("k,metric,value"));
    assert_eq!(csv.lines().count(), 1 + 12);

    let verify = ok(&gres(dir.path(), &["verify"]));
    assert!(!verify.contains("FAIL"));
    assert!(verify.contains("stored metric report"));
}

#[test]
fn missing_stages_name_the_command_to_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = gres(dir.path(), &["build-graphs"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("run gen-data first"), "{}", stderr(&out));
    ok(&gres(dir.path(), &["gen-data"]));
    assert!(stderr(&gres(dir.path(), &["train"])).contains("run build-graphs first"));
    assert!(stderr(&gres(dir.path(), &["evaluate"])).contains("run train first"));
}

#[test]
fn unknown_variant_and_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = gres(dir.path(), &["gen-data", "--variant", "no-such"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("no-fix-position"));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nlearning_rat = 0.1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_gres"))
        .args(["gen-data", "--config"])
        .arg(&bad)
        .arg("--out")
        .arg(dir.path().join("o"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(stderr(&out).contains("learning_rat"), "{}", stderr(&out));
}

#[test]
fn seed_flag_changes_the_data() {
    let dir = tempfile::tempdir().unwrap();
    ok(&gres(dir.path(), &["gen-data", "--seed", "1"]));
    let a = fs::read_to_string(dir.path().join("out/data/interactions.jsonl")).unwrap();
    ok(&gres(dir.path(), &["gen-data", "--seed", "2"]));
    let b = fs::read_to_string(dir.path().join("out/data/interactions.jsonl")).unwrap();
    assert_ne!(a, b);
    ok(&gres(dir.path(), &["gen-data", "--seed", "1"]));
    let c = fs::read_to_string(dir.path().join("out/data/interactions.jsonl")).unwrap();
    assert_eq!(a, c);
}
