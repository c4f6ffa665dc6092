use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn cwm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cwm"))
        .args(args)
        .env_remove("CWM_THREADS")
        .output()
        .expect("failed to run cwm")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL_DATA: [&str; 8] = [
    "--height",
    "32",
    "--width",
    "32",
    "--train-count",
    "2",
    "--val-count",
    "2",
];

fn assert_provenance(dir: &Path, command: &str) -> Value {
    let p = read_json(&dir.join("run_config.json"));
    assert_eq!(p["tool"], "cwm");
    assert_eq!(p["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(p["command"], command);
    assert!(p["config"]["train"].is_object());
    p
}

#[test]
fn masks_prints_the_schedule() {
    let o = cwm(&["masks", "--channels", "8", "--rho", "0.25"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let json: Value = serde_json::from_str(out.lines().next().unwrap()).unwrap();
    assert_eq!(
        json["masks"],
        serde_json::json!([{"start": 0, "end": 5}, {"start": 3, "end": 8}])
    );
    assert!(out.contains("t=1   |#####...|  [0, 5)"), "{out}");
    assert!(out.contains("t=2   |...#####|  [3, 8)"), "{out}");
}

#[test]
fn unknown_flag_exits_1_with_usage() {
    let o = cwm(&["masks", "--channels", "8", "--rho", "0.25", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    let o = cwm(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn help_exits_0() {
    let o = cwm(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    for sub in [
        "gen-data",
        "train",
        "eval",
        "bench",
        "flops",
        "masks",
        "reproduce",
    ] {
        assert!(stdout(&o).contains(sub), "{sub}");
    }
}

#[test]
fn config_errors_exit_1_naming_the_field() {
    let o = cwm(&["masks", "--channels", "8", "--rho", "1.5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("rho"), "{}", stderr(&o));

    let o = cwm(&["flops", "--alpha", "1.2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("alpha"), "{}", stderr(&o));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"train": {"learning_rate": 0.1}}"#).unwrap();
    let o = cwm(&["flops", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));

    fs::write(&cfg, r#"{"train": {"sequences_per_sample": 5}}"#).unwrap();
    let o = cwm(&["flops", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).contains("sequences_per_sample"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn runtime_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let o = cwm(&["eval", "--weights", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("nope"), "{}", stderr(&o));
}

#[test]
fn flops_reports_both_modes_and_records_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("flops");
    let o = cwm(&[
        "flops",
        "--rho",
        "0",
        "--base-width",
        "8",
        "--out",
        out.to_str().unwrap(),
        "--json",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let ratio = report["total_ratio"].as_f64().unwrap();
    assert!(ratio > 0.0 && ratio < 1.0, "{ratio}");
    assert!(out.join("flops.csv").exists());
    assert_provenance(&out, "flops");
}

#[test]
fn gen_train_eval_pipeline_writes_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let mut args = vec!["gen-data", "--out", data.to_str().unwrap()];
    args.extend(SMALL_DATA);
    let o = cwm(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_provenance(&data, "gen-data");

    let train = |out: &Path| {
        cwm(&[
            "train",
            "--data-dir",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--base-width",
            "8",
            "--rho",
            "0.25",
            "--epochs",
            "1",
        ])
    };
    let run1 = dir.path().join("run1");
    let o = train(&run1);
    assert!(o.status.success(), "{}", stderr(&o));
    let p = assert_provenance(&run1, "train");
    assert_eq!(p["config"]["data"]["height"], 32);
    assert_eq!(p["config"]["network"]["rho"], 0.25);
    assert!(run1.join("weights").join("manifest.json").exists());
    assert!(run1.join("train.csv").exists());

    let run2 = dir.path().join("run2");
    assert!(train(&run2).status.success());
    let losses = |d: &Path| {
        read_json(&d.join("train.json"))["epochs"]
            .as_array()
            .unwrap()
            .iter()
            .map(|e| e["loss"].clone())
            .collect::<Vec<_>>()
    };
    assert_eq!(losses(&run1), losses(&run2));

    let ev = dir.path().join("eval");
    let o = cwm(&[
        "eval",
        "--weights",
        run1.join("weights").to_str().unwrap(),
        "--data-dir",
        data.to_str().unwrap(),
        "--k",
        "4",
        "--average-pair",
        "--out",
        ev.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let miou = read_json(&ev.join("eval.json"))["miou"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&miou));
    assert_provenance(&ev, "eval");

    let o = cwm(&[
        "eval",
        "--weights",
        run1.join("weights").to_str().unwrap(),
        "--data-dir",
        data.to_str().unwrap(),
        "--sweep",
        "1:6",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 7, "{}", stdout(&o));
}

#[test]
fn threads_env_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let mut args = vec!["gen-data", "--out", out.to_str().unwrap()];
    args.extend(SMALL_DATA);
    let o = Command::new(env!("CARGO_BIN_EXE_cwm"))
        .args(&args)
        .env("CWM_THREADS", "3")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(assert_provenance(&out, "gen-data")["compute_threads"], 3);
}
