use std::path::Path;
use std::process::{Command, Output};

fn eigenkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eigenkit"))
        .args(args)
        .output()
        .expect("spawn eigenkit")
}

fn ok(args: &[&str]) -> Output {
    let out = eigenkit(args);
    assert!(
        out.status.success(),
        "eigenkit {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn data_rows(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn gen_creates_dir_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("nested/a");
    let b = tmp.path().join("b");
    ok(&["gen", "--seed", "3", "--out", s(&a)]);
    ok(&["gen", "--seed", "3", "--out", s(&b)]);
    let ta = std::fs::read(a.join("traces.jsonl")).unwrap();
    assert_eq!(ta, std::fs::read(b.join("traces.jsonl")).unwrap());
    assert_eq!(String::from_utf8(ta).unwrap().lines().count(), 200);
    assert!(a.join("gen.config.json").exists());

    ok(&["gen", "--kind", "mixture", "--seed", "3", "--out", s(&a)]);
    ok(&["gen", "--kind", "mixture", "--seed", "3", "--out", s(&b)]);
    assert_eq!(
        std::fs::read(a.join("mixture.csv")).unwrap(),
        std::fs::read(b.join("mixture.csv")).unwrap()
    );
    assert_eq!(data_rows(&a.join("mixture.csv")), 8 * 500);
}

#[test]
fn resolved_config_lists_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["gen", "--kind", "mixture", "--seed", "9", "--out", s(tmp.path())]);
    let text = std::fs::read_to_string(tmp.path().join("gen.config.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["seed"], 9);
    assert_eq!(v["mixture"]["seed"], 9);
    assert_eq!(v["monitor"]["window_len"], 30);
    assert_eq!(v["pipeline"]["quantile"], 0.5);
}

#[test]
fn bad_config_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, r#"{"seeed": 1}"#).unwrap();
    let out = eigenkit(&["gen", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("config"));

    std::fs::write(&cfg, r#"{"monitor": {"window_len": 2}}"#).unwrap();
    let out = eigenkit(&["gen", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let traces = tmp.path().join("traces.jsonl");
    let out = eigenkit(&["extract", "--config", s(&cfg), "--traces", s(&traces), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));

    let missing = eigenkit(&["gen", "--config", "/nonexistent/x.json", "--out", s(tmp.path())]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn extract_row_counts_and_corruption() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(&["gen", "--out", s(dir)]);
    let traces = dir.join("traces.jsonl");
    ok(&["extract", "--traces", s(&traces), "--out", s(dir)]);
    assert_eq!(data_rows(&dir.join("descriptors.csv")), 200 * 91);
    let n25 = dir.join("n25");
    ok(&["extract", "--traces", s(&traces), "--window-len", "25", "--out", s(&n25)]);
    assert_eq!(data_rows(&n25.join("descriptors.csv")), 200 * 96);

    let text = std::fs::read_to_string(&traces).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[16] = "{\"trace_id\": \"broken\", \"tokens\": [[1.0,";
    let corrupt = dir.join("corrupt.jsonl");
    std::fs::write(&corrupt, lines.join("\n") + "\n").unwrap();
    let out = eigenkit(&["extract", "--traces", s(&corrupt), "--out", s(dir)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line 17"), "{}", stderr(&out));

    let out = eigenkit(&["extract", "--traces", s(&dir.join("nope.jsonl")), "--out", s(dir)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_and_eval_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = dir.join("run.json");
    std::fs::write(&cfg, r#"{"traces": {"n_per_class": 40}, "head": {"train": {"epochs": 10}}}"#).unwrap();
    let c = s(&cfg);
    ok(&["gen", "--config", c, "--out", s(dir)]);
    let traces = dir.join("traces.jsonl");
    ok(&["train-head", "--config", c, "--traces", s(&traces), "--cell", "rnn,gru,lstm", "--out", s(dir)]);
    for cell in ["rnn", "gru", "lstm"] {
        assert!(dir.join(format!("head_{cell}.json")).exists());
    }
    assert_eq!(data_rows(&dir.join("head_comparison.csv")), 3);

    let ck = dir.join("head_gru.json");
    ok(&["eval", "--config", c, "--checkpoint", s(&ck), "--traces", s(&traces), "--budgets", "30,60,120", "--out", s(dir)]);
    assert_eq!(data_rows(&dir.join("early_detection.csv")), 3);
    let metrics = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("cell,split,traces,auroc\n"));
    assert!(metrics.contains("gru,test,"));

    let out = eigenkit(&["eval", "--checkpoint", s(&dir.join("missing.json")), "--traces", s(&traces), "--out", s(dir)]);
    assert_eq!(out.status.code(), Some(2));

    // Single-class input cannot train a detector.
    let text = std::fs::read_to_string(&traces).unwrap();
    let one: Vec<&str> = text.lines().filter(|l| l.contains("\"factual\"")).collect();
    assert!(!one.is_empty());
    let single = dir.join("single.jsonl");
    std::fs::write(&single, one.join("\n") + "\n").unwrap();
    let out = eigenkit(&["train-head", "--config", c, "--traces", s(&single), "--out", s(dir)]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));

    let out = eigenkit(&["train-head", "--out", s(dir)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn compress_sweep_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(&["compress", "--out", s(dir)]);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    let reduction = summary["reduction"].as_f64().unwrap();
    let drop = summary["acc_before"].as_f64().unwrap() - summary["acc_after"].as_f64().unwrap();
    assert!(reduction >= 0.40 && drop <= 0.01, "{summary}");
    assert!(dir.join("mlp_compressed.json").exists());
    assert!(data_rows(&dir.join("stages.csv")) >= 1);

    let pre = dir.join("mlp_trained.json");
    ok(&["sweep", "--pretrained", s(&pre), "--quantiles", "0.3,0.5,0.7,0.9", "--out", s(dir)]);
    assert_eq!(data_rows(&dir.join("sweep.csv")), 4);

    let out = eigenkit(&["compress", "--pretrained", s(&dir.join("absent.json")), "--out", s(dir)]);
    assert_eq!(out.status.code(), Some(2));

    ok(&["report", "--out", s(dir)]);
    let report = std::fs::read_to_string(dir.join("report.md")).unwrap();
    assert!(report.contains("## summary.json") && report.contains("## sweep.csv"));

    let empty = dir.join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert_eq!(eigenkit(&["report", "--out", s(&empty)]).status.code(), Some(2));
}

#[test]
fn accuracy_gate_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.json");
    // An untrained network cannot clear the gate.
    std::fs::write(&cfg, r#"{"mlp": {"train": {"max_epochs": 0}}}"#).unwrap();
    let out = eigenkit(&["compress", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("accuracy"), "{}", stderr(&out));
}
