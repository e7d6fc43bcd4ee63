use std::path::Path;
use std::process::{Command, Output};

fn flowplan(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowplan"))
        .args(args)
        .current_dir(cwd)
        .env("FLOWPLAN_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn toy(dir: &Path, epochs: &str) {
    ok(&flowplan(&["make-toy", "--out", ".", "--seed", "2", "--epochs", epochs], dir));
}

#[test]
fn paths_are_listed_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    toy(dir.path(), "1");
    let a = ok(&flowplan(&["paths", "--flowchart", "flowcharts/wont_start.json"], dir.path()));
    let b = ok(&flowplan(&["paths", "--flowcharts", "flowcharts"], dir.path()));
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 5);
    assert!(a.lines().all(|l| l.starts_with("D0|")));
}

#[test]
fn coverage_reports_the_uncovered_path() {
    let dir = tempfile::tempdir().unwrap();
    toy(dir.path(), "1");
    let out = ok(&flowplan(&["coverage", "--flowcharts", "flowcharts", "--corpus", "corpus.jsonl"], dir.path()));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["total_paths"], 5);
    assert_eq!(v["covered_paths"], 4);
    assert_eq!(v["charts"][0]["uncovered_path_ids"][0], "D0|No>D2|No>A4");
}

#[test]
fn validation_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    toy(dir.path(), "1");
    assert_eq!(flowplan(&["paths", "--flowcharts", "flowcharts", "--bogus"], dir.path()).status.code(), Some(1));
    assert_eq!(flowplan(&["paths"], dir.path()).status.code(), Some(1));
    assert_eq!(flowplan(&["paths", "--flowchart", "missing.json"], dir.path()).status.code(), Some(1));

    std::fs::write(dir.path().join("bad.jsonl"), "{\"id\": 3}\n").unwrap();
    let out = flowplan(&["coverage", "--flowcharts", "flowcharts", "--corpus", "bad.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));

    let out = flowplan(&["inspect", "--flowcharts", "flowcharts", "--corpus", "corpus.jsonl", "--setting", "out", "--out", "s"], dir.path());
    assert_eq!(out.status.code(), Some(1), "toy corpus has no held-out flowcharts");
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    toy(dir.path(), "1");
    std::fs::write(dir.path().join("ck.safetensors"), b"not a checkpoint").unwrap();
    let out = flowplan(
        &["generate", "--flowcharts", "flowcharts", "--checkpoint", "ck.safetensors", "--base-size", "2", "--out", "syn.jsonl"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("syn.jsonl").exists());
}

#[test]
fn outputs_never_overwrite_inputs() {
    let dir = tempfile::tempdir().unwrap();
    toy(dir.path(), "1");
    let before = std::fs::read(dir.path().join("corpus.jsonl")).unwrap();
    let out = flowplan(
        &["train", "--flowcharts", "flowcharts", "--corpus", "corpus.jsonl", "--config", "train.json", "--out", "corpus.jsonl"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(std::fs::read(dir.path().join("corpus.jsonl")).unwrap(), before);
}

#[test]
fn inspect_summarizes_and_splits() {
    let dir = tempfile::tempdir().unwrap();
    toy(dir.path(), "1");
    let out = ok(&flowplan(&["inspect", "--flowcharts", "flowcharts", "--corpus", "corpus.jsonl"], dir.path()));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["dialogues"], 20);
    let total: f64 = v["act_distribution"].as_object().unwrap().values().map(|x| x.as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9);

    for (flag, value, dir_name) in [("--setting", "in", "in"), ("--split-uncovered", "0.8", "unc")] {
        ok(&flowplan(&["inspect", "--flowcharts", "flowcharts", "--corpus", "corpus.jsonl", flag, value, "--out", dir_name], dir.path()));
        let count = |f: &str| std::fs::read_to_string(dir.path().join(dir_name).join(f)).unwrap().lines().count();
        assert_eq!(count("train.jsonl") + count("test.jsonl"), 20);
    }
}

#[test]
fn end_to_end_pipeline_on_the_toy_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    toy(d, "50");
    let inputs = std::fs::read(d.join("corpus.jsonl")).unwrap();
    let charts = ["--flowcharts", "flowcharts"];
    let train = |out: &str| {
        let mut args = vec!["train"];
        args.extend(charts);
        args.extend(["--corpus", "corpus.jsonl", "--config", "train.json", "--out", out]);
        ok(&flowplan(&args, d));
    };
    train("ck.safetensors");
    let log = std::fs::read_to_string(d.join("ck.safetensors.metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 50);

    let generate = |out: &str| {
        let mut args = vec!["generate"];
        args.extend(charts);
        args.extend(["--checkpoint", "ck.safetensors", "--corpus", "corpus.jsonl", "--factor", "10", "--seed", "4", "--out", out]);
        ok(&flowplan(&args, d));
        std::fs::read(d.join(out)).unwrap()
    };
    let a = generate("syn_a.jsonl");
    let b = generate("syn_b.jsonl");
    assert_eq!(a, b, "fixed seed gives byte-identical output");
    assert_eq!(String::from_utf8_lossy(&a).lines().count(), 180);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("syn_a.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["per_path"].as_object().unwrap().len(), 5);

    let mut args = vec!["evaluate"];
    args.extend(charts);
    args.extend(["--candidates", "syn_a.jsonl", "--references", "corpus.jsonl"]);
    let report: serde_json::Value = serde_json::from_str(ok(&flowplan(&args, d)).trim()).unwrap();
    assert_eq!(report["candidates"], 180);
    let bleu = report["bleu4"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&bleu));

    assert_eq!(std::fs::read(d.join("corpus.jsonl")).unwrap(), inputs);
}
