use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hmdn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hmdn"))
        .args(args)
        .env_remove("HMDN_CONFIG")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = hmdn(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    stdout(&o)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_data_writes_twelve_cells() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let report = ok(&["gen-data", "--out", p(&out), "--n-examples", "3000"]);
    // header, one line per partition cell, summary
    assert_eq!(report.lines().count(), 14, "{report}");
    assert!(report.ends_with("cells=12 examples=3000\n"), "{report}");
    for f in ["train.csv", "test.csv", "schema.json"] {
        assert!(out.join(f).exists());
    }
    let schema: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("schema.json")).unwrap()).unwrap();
    assert!(schema.is_object());
}

#[test]
fn gen_data_is_byte_identical_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    ok(&["gen-data", "--out", p(&a), "--n-examples", "500", "--data-seed", "4"]);
    ok(&["gen-data", "--out", p(&b), "--n-examples", "500", "--data-seed", "4"]);
    ok(&["gen-data", "--out", p(&c), "--n-examples", "500", "--data-seed", "5"]);
    let read = |d: &Path| fs::read(d.join("train.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn gen_data_single_example() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("one");
    ok(&["gen-data", "--out", p(&out), "--n-examples", "1"]);
    let rows = |f: &str| fs::read_to_string(out.join(f)).unwrap().lines().count() - 1;
    assert_eq!(rows("train.csv") + rows("test.csv"), 1);
}

#[test]
fn train_eval_and_inspect_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    ok(&["gen-data", "--out", p(&data), "--n-examples", "2000"]);
    let ckpt = dir.path().join("m.ckpt");
    let metrics = dir.path().join("metrics.jsonl");
    let trace = ok(&[
        "train",
        "--train-path",
        p(&data.join("train.csv")),
        "--test-path",
        p(&data.join("test.csv")),
        "--epochs",
        "1",
        "--depth",
        "2",
        "--codebook-size",
        "16",
        "--checkpoint",
        p(&ckpt),
        "--metrics-file",
        p(&metrics),
    ]);
    assert_eq!(fs::read_to_string(&metrics).unwrap(), trace);
    let records: Vec<serde_json::Value> = trace.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(records.iter().any(|r| r["metric"] == "loss" && r["split"] == "train"));
    let test_auc = records
        .iter()
        .rev()
        .find(|r| r["metric"] == "auc" && r["split"] == "test")
        .unwrap()["value"]
        .as_f64()
        .unwrap();

    let eval = ok(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data.join("test.csv"))]);
    let auc = eval
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .find(|r| r["metric"] == "auc")
        .unwrap()["value"]
        .as_f64()
        .unwrap();
    assert_eq!(auc, test_auc);

    let table = ok(&["inspect-codebooks", "--checkpoint", p(&ckpt), "--data", p(&data.join("test.csv"))]);
    assert_eq!(table.lines().count(), 3, "{table}");
    assert!(table.lines().nth(1).unwrap().starts_with("1\t16\t"));
}

#[test]
fn config_file_and_flags_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(
        &cfg,
        r#"{"backbone": {"kind": "dw", "hidden": [8, 4]}, "training": {"epochs": 1}, "data": {"synthetic": {"n_examples": 800}}}"#,
    )
    .unwrap();
    let ckpt = dir.path().join("dw.ckpt");
    ok(&["train", "--config", p(&cfg), "--alpha", "0", "--depth", "1", "--checkpoint", p(&ckpt)]);
    let header = fs::read(&ckpt).unwrap();
    let text = String::from_utf8_lossy(&header[20..]);
    assert!(text.contains("\"dw\""));
    assert!(text.contains("\"depth\":1"));
    // synthetic checkpoints evaluate against the regenerated test split
    ok(&["eval", "--checkpoint", p(&ckpt), "--config", p(&cfg)]);
}

#[test]
fn invalid_configuration_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"training": {"epochs": 1, "momentum": 0.9}}"#).unwrap();
    assert_eq!(hmdn(&["train", "--config", p(&cfg)]).status.code(), Some(1));
    assert_eq!(hmdn(&["train", "--backbone", "mmoe"]).status.code(), Some(1));
    assert_eq!(hmdn(&["train", "--lr=-1"]).status.code(), Some(1));
    assert_eq!(hmdn(&["train", "--no-such-flag"]).status.code(), Some(1));
    let missing = dir.path().join("missing.csv");
    assert_eq!(hmdn(&["train", "--train-path", p(&missing)]).status.code(), Some(1));
}

#[test]
fn gradcheck_passes_by_default() {
    let out = ok(&["gradcheck", "--n-examples", "400"]);
    assert!(out.contains("freeze_codes=on"));
    let dnn = ok(&["gradcheck", "--n-examples", "400", "--backbone", "dnn", "--tolerance", "1e-6"]);
    assert!(!dnn.contains("quantizer."));
}

/// Without frozen codes the loss is piecewise constant along the
/// straight-through path, so only the exclusion report is checked.
#[test]
fn gradcheck_unfrozen_reports_exclusions() {
    let excluded = |extra: &[&str]| -> usize {
        let mut args = vec!["gradcheck", "--n-examples", "400", "--freeze-codes", "off"];
        args.extend_from_slice(extra);
        let out = stdout(&hmdn(&args));
        let last = out.lines().last().unwrap().to_string();
        assert!(last.contains("freeze_codes=off"), "{last}");
        last.split_whitespace()
            .find_map(|t| t.strip_prefix("excluded="))
            .unwrap()
            .parse()
            .unwrap()
    };
    assert!(excluded(&["--step", "0.05"]) > 0);
    assert!(excluded(&["--step", "0.05", "--mode", "explicit", "--depth", "3"]) > 0);
}

#[test]
fn gradcheck_failure_exits_with_two() {
    let o = hmdn(&["gradcheck", "--n-examples", "400", "--tolerance", "1e-15"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ablation_single_model() {
    let out = ok(&["ablation", "--models", "dnn", "--seeds", "0", "--n-examples", "1500", "--epochs", "1"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("dnn\t"));
    let json = ok(&[
        "ablation", "--models", "hmdn-dw,dnn", "--seeds", "0,1", "--n-examples", "1500", "--epochs", "1", "--json",
    ]);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 2);
    assert_eq!(v["rows"][0]["model"], "dnn");
    assert_eq!(hmdn(&["ablation", "--models", "mmoe"]).status.code(), Some(1));
}

#[test]
fn sweep_depth_rows_and_validation() {
    let out = ok(&["sweep-depth", "--depths", "1", "--seeds", "0", "--n-examples", "1500", "--epochs", "1"]);
    assert_eq!(out.lines().count(), 2);
    assert!(out.lines().nth(1).unwrap().starts_with("1\t"));
    let dup = hmdn(&["sweep-depth", "--depths", "2,2", "--n-examples", "1500"]);
    assert_eq!(dup.status.code(), Some(1));
    let dnn = hmdn(&["sweep-depth", "--depths", "1", "--backbone", "dnn", "--n-examples", "1500"]);
    assert_eq!(dnn.status.code(), Some(1));
}
