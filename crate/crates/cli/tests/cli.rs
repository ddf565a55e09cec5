use std::path::Path;
use std::process::{Command, Output};

fn kfbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kfbench"))
        .args(args)
        .env_remove("KFBENCH_SEED")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate_linear(out: &Path, seed: &str, num: &str) {
    let o = kfbench(&[
        "simulate", "--model", "linear", "--seq-len", "40", "--num-seq", num, "--seed", seed, "--out", path(out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

const LINEAR_CONFIG: &str = r#"{ "benchmark": { "name": "linear", "seq_len": 40 } }"#;

#[test]
fn simulate_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a.json"), dir.path().join("b.json"), dir.path().join("c.json"));
    simulate_linear(&a, "4", "3");
    simulate_linear(&b, "4", "3");
    simulate_linear(&c, "5", "3");
    let read = |p: &Path| std::fs::read_to_string(p).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn seed_variable_overrides_flag() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    simulate_linear(&a, "7", "2");
    let o = Command::new(env!("CARGO_BIN_EXE_kfbench"))
        .args(["simulate", "--model", "linear", "--seq-len", "40", "--num-seq", "2", "--seed", "1", "--out", path(&b)])
        .env("KFBENCH_SEED", "7")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(std::fs::read_to_string(&a).unwrap(), std::fs::read_to_string(&b).unwrap());
}

#[test]
fn eval_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("test.json");
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, LINEAR_CONFIG).unwrap();
    simulate_linear(&data, "0", "4");
    let mut reports = Vec::new();
    for method in ["kf", "ekf", "noise"] {
        let report = dir.path().join(format!("{method}.json"));
        let o = kfbench(&[
            "eval", "--method", method, "--data", path(&data), "--config", path(&cfg), "--report", path(&report),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        reports.push(report);
    }
    let inputs = reports.iter().map(|p| path(p)).collect::<Vec<_>>().join(",");
    let o = kfbench(&["report", "--inputs", &inputs, "--format", "csv"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "method,mean_db,std_db,sequences");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("noise,"));

    let o = kfbench(&["report", "--inputs", &inputs, "--format", "markdown"]);
    assert!(String::from_utf8(o.stdout).unwrap().starts_with("| Method | MSE [dB] |"));
}

#[test]
fn train_then_eval_knet() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = (dir.path().join("train.json"), dir.path().join("test.json"));
    let (cfg, ckpt, report) = (dir.path().join("cfg.json"), dir.path().join("k.ckpt"), dir.path().join("r.json"));
    std::fs::write(
        &cfg,
        r#"{ "benchmark": { "name": "linear", "seq_len": 40 },
             "method": { "method": "knet", "train": { "epochs": 2, "lr": 0.002 } } }"#,
    )
    .unwrap();
    let o = kfbench(&["simulate", "--model", "linear", "--seq-len", "40", "--num-seq", "20", "--split", "train", "--out", path(&train)]);
    assert!(o.status.success());
    simulate_linear(&test, "0", "3");
    let o = kfbench(&["train", "--method", "knet", "--data", path(&train), "--config", path(&cfg), "--out", path(&ckpt)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = kfbench(&[
        "eval", "--method", "knet", "--data", path(&test), "--ckpt", path(&ckpt), "--config", path(&cfg), "--report",
        path(&report),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["method"], "knet");
    assert_eq!(r["per_sequence_db"].as_array().unwrap().len(), 3);
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let report = dir.path().join("r.json");
    let o = kfbench(&["eval", "--method", "ekf", "--data", path(&missing), "--report", path(&report)]);
    assert_eq!(o.status.code(), Some(2));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{ "benchmark": { "name": "linear" }, "bogus": 1 }"#).unwrap();
    let data = dir.path().join("d.json");
    simulate_linear(&data, "0", "1");
    let o = kfbench(&["eval", "--method", "kf", "--data", path(&data), "--config", path(&bad), "--report", path(&report)]);
    assert_eq!(o.status.code(), Some(2));

    // A method in the file that contradicts the flag.
    std::fs::write(&bad, r#"{ "method": { "method": "ekf" } }"#).unwrap();
    let o = kfbench(&["eval", "--method", "pf", "--data", path(&data), "--config", path(&bad), "--report", path(&report)]);
    assert_eq!(o.status.code(), Some(2));

    let o = kfbench(&["report", "--inputs", path(&data), "--format", "xml"]);
    assert_eq!(o.status.code(), Some(2));
    let o = kfbench(&["eval", "--method", "knet", "--data", path(&data), "--report", path(&report)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn numeric_failure_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.json");
    simulate_linear(&data, "0", "1");
    // An observation variance of zero with a zero prior makes the innovation
    // covariance singular.
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{ "benchmark": { "name": "linear", "r": [[0.0]], "q": [[0.0]], "init_cov": [[0.0]] } }"#,
    )
    .unwrap();
    let report = dir.path().join("r.json");
    let o = kfbench(&["eval", "--method", "kf", "--data", path(&data), "--config", path(&cfg), "--report", path(&report)]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn run_suite_on_linear_benchmark() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("suite.json");
    std::fs::write(
        &cfg,
        r#"{ "benchmark": { "name": "linear", "seq_len": 30 },
             "splits": { "train": 0, "val": 0, "test": 3 },
             "methods": [ { "method": "kf" }, { "method": "noise" }, { "method": "pf", "particles": 200 } ] }"#,
    )
    .unwrap();
    let reports = dir.path().join("reports");
    let o = kfbench(&["run", "--config", path(&cfg), "--report-dir", path(&reports), "--format", "csv"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(reports.join("pf.json").exists());
    assert_eq!(String::from_utf8(o.stdout).unwrap().lines().count(), 4);
}
