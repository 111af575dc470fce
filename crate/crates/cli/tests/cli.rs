//! Drives the `topicalign` binary through its subcommands on a tiny corpus.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_topicalign"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn preprocess_into(dir: &Path, corpus: &Path) -> Output {
    ok(&[
        "preprocess",
        "--corpus",
        s(corpus),
        "--embeddings",
        s(&fixture("embeddings.txt")),
        "--out",
        s(dir),
        "--min-df",
        "2",
    ])
}

fn write_config(dir: &Path, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let mut cfg: Value = serde_json::from_str(&fs::read_to_string(fixture("train_config.json")).unwrap()).unwrap();
    edit(&mut cfg);
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn train_into(data: &Path, config: &Path, out: &Path) -> Output {
    ok(&[
        "train",
        "--config",
        s(config),
        "--data",
        s(data),
        "--llm",
        "mock",
        "--mock-script",
        s(&fixture("mock_script.jsonl")),
        "--mock-default",
        "nearest",
        "--out",
        s(out),
    ])
}

/// Preprocessed data plus one default training run.
struct Workspace {
    _tmp: TempDir,
    root: PathBuf,
    data: PathBuf,
    run: PathBuf,
}

fn workspace() -> Workspace {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let data = root.join("data");
    preprocess_into(&data, &fixture("corpus.jsonl"));
    let run = root.join("run");
    train_into(&data, &fixture("train_config.json"), &run);
    Workspace {
        _tmp: tmp,
        root,
        data,
        run,
    }
}

fn metrics_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn preprocess_prints_statistics_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let out = preprocess_into(&a, &fixture("corpus.jsonl"));
    preprocess_into(&b, &fixture("corpus.jsonl"));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], "#docs\t#train\t#test\tV\tavg_length\t#labels");
    let fields: Vec<&str> = lines[1].split('\t').collect();
    assert_eq!(fields[0], "12");
    assert_eq!(fields[3], "18");
    assert_eq!(fields[5], "3");
    for f in ["vocab.txt", "train.jsonl", "test.jsonl", "embeddings.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let vocab = fs::read_to_string(a.join("vocab.txt")).unwrap();
    assert!(!vocab.lines().any(|w| w == "late" || w == "new"), "words without vectors are dropped");
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["preprocess", "--embeddings", s(&fixture("embeddings.txt")), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    let missing = tmp.path().join("missing.jsonl");
    let out = run(&[
        "preprocess",
        "--corpus",
        s(&missing),
        "--embeddings",
        s(&fixture("embeddings.txt")),
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn invalid_training_config_is_a_usage_error() {
    let w = workspace();
    let cfg = write_config(&w.root, |c| c["warmup_steps"] = 3.into());
    let out = run(&[
        "train", "--config", s(&cfg), "--data", s(&w.data), "--llm", "mock", "--out", s(&w.root.join("x")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let cfg = write_config(&w.root, |c| c["t_refine"] = 99.into());
    let out = run(&[
        "train", "--config", s(&cfg), "--data", s(&w.data), "--llm", "mock", "--out", s(&w.root.join("x")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn training_writes_the_run_directory() {
    let w = workspace();
    for f in ["checkpoint.json", "train_config.json", "metrics.csv", "epochs.csv", "topics.jsonl", "refinements.jsonl"] {
        assert!(w.run.join(f).is_file(), "{f}");
    }
    for step in [10, 20] {
        assert!(w.run.join(format!("checkpoints/step_{step:06}.json")).is_file());
    }
    // The final parameters live in checkpoint.json only.
    assert!(!w.run.join("checkpoints/step_000030.json").exists());
    let rows = metrics_rows(&w.run.join("metrics.csv"));
    assert_eq!(rows.len(), 30);
    for row in &rows {
        let step: u64 = row[0].parse().unwrap();
        let refine: f64 = row[2].parse().unwrap();
        if step <= 20 {
            assert_eq!(refine, 0.0);
            assert!(row[4].parse::<f64>().unwrap().is_nan());
        } else {
            assert!(refine > 0.0, "step {step}");
        }
    }
    let saved: Value = serde_json::from_str(&fs::read_to_string(w.run.join("train_config.json")).unwrap()).unwrap();
    assert_eq!(saved["schedule"]["t_total"], 30);
    assert_eq!(saved["config"]["seed"], 7);
}

#[test]
fn warm_up_only_and_zero_gamma_runs_share_a_checkpoint() {
    let w = workspace();
    let warm = write_config(&w.root, |c| c["t_refine"] = 30.into());
    train_into(&w.data, &warm, &w.root.join("warm"));
    let zero = write_config(&w.root, |c| c["gamma"] = 0.0.into());
    train_into(&w.data, &zero, &w.root.join("zero"));
    for row in metrics_rows(&w.root.join("warm/metrics.csv")) {
        assert_eq!(row[2].parse::<f64>().unwrap(), 0.0);
    }
    assert_eq!(
        fs::read(w.root.join("warm/checkpoint.json")).unwrap(),
        fs::read(w.root.join("zero/checkpoint.json")).unwrap()
    );
    assert_ne!(
        fs::read(w.root.join("warm/checkpoint.json")).unwrap(),
        fs::read(w.run.join("checkpoint.json")).unwrap()
    );
}

#[test]
fn same_seed_reproduces_outputs() {
    let w = workspace();
    let again = w.root.join("again");
    train_into(&w.data, &fixture("train_config.json"), &again);
    for f in ["checkpoint.json", "metrics.csv", "topics.jsonl", "refinements.jsonl"] {
        assert_eq!(fs::read(w.run.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

fn evaluate(w: &Workspace, data: &Path, checkpoint: &Path, out: &Path) -> Value {
    ok(&[
        "evaluate",
        "--checkpoint",
        s(checkpoint),
        "--data",
        s(data),
        "--reference",
        s(&fixture("corpus.jsonl")),
        "--out",
        s(out),
    ]);
    let _ = w;
    serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap()
}

#[test]
fn evaluation_report_has_every_metric_and_is_stable() {
    let w = workspace();
    let ckpt = w.run.join("checkpoint.json");
    let a = evaluate(&w, &w.data, &ckpt, &w.root.join("a.json"));
    let b = evaluate(&w, &w.data, &ckpt, &w.root.join("b.json"));
    assert_eq!(
        fs::read(w.root.join("a.json")).unwrap(),
        fs::read(w.root.join("b.json")).unwrap()
    );
    for key in ["cv", "npmi_mean", "purity", "nmi", "pn", "td", "tq", "topics"] {
        assert!(a.get(key).is_some(), "missing {key}");
    }
    let (p, n) = (a["purity"].as_f64().unwrap(), a["nmi"].as_f64().unwrap());
    assert!((a["pn"].as_f64().unwrap() - (p + n) / 2.0).abs() < 1e-12);
    let (cv, td) = (a["cv"].as_f64().unwrap(), a["td"].as_f64().unwrap());
    assert!((a["tq"].as_f64().unwrap() - cv * td).abs() < 1e-12);
    assert_eq!(a["topics"].as_array().unwrap().len(), 3);
    assert_eq!(a, b);
}

#[test]
fn unlabelled_test_split_omits_clustering_metrics() {
    let w = workspace();
    let corpus: String = fs::read_to_string(fixture("corpus.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("label");
            format!("{v}\n")
        })
        .collect();
    let unlabelled = w.root.join("unlabelled.jsonl");
    fs::write(&unlabelled, corpus).unwrap();
    let data = w.root.join("data_unlabelled");
    preprocess_into(&data, &unlabelled);
    let report = evaluate(&w, &data, &w.run.join("checkpoint.json"), &w.root.join("u.json"));
    for key in ["purity", "nmi", "pn"] {
        assert!(report.get(key).is_none(), "{key} present");
    }
    assert!(report.get("cv").is_some());
}

fn refine_once(words: &str, vocab: &Path, default: &str) -> Output {
    run(&[
        "refine-once",
        "--words",
        words,
        "--llm",
        "mock",
        "--mock-script",
        s(&fixture("mock_script.jsonl")),
        "--mock-default",
        default,
        "--vocab",
        s(vocab),
    ])
}

#[test]
fn refine_once_shows_every_intermediate() {
    let w = workspace();
    let vocab = w.data.join("vocab.txt");
    let out = refine_once("team,football,match,goal,coach", &vocab, "malformed");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["prompt"].as_str().unwrap().contains("team, football, match, goal, coach"));
    assert!(v["completion"]["text"].as_str().unwrap().contains("sports games"));
    assert_eq!(v["suggestion"]["label"], serde_json::json!(["sports", "games"]));
    assert_eq!(v["suggestion"]["dropped_oov"], serde_json::json!(["stadium"]));
    assert!((v["confidence"]["label_token_prob"].as_f64().unwrap() - 0.72).abs() < 1e-12);
    assert_eq!(v["confidence"]["selected"]["method"], "label_token_prob");

    let cooking = refine_once("bread,chef,pasta,sauce,tomato", &vocab, "malformed");
    let v: Value = serde_json::from_slice(&cooking.stdout).unwrap();
    assert!((v["confidence"]["word_intrusion"].as_f64().unwrap() - 0.4).abs() < 1e-12);
}

#[test]
fn refine_once_reports_unparseable_completions() {
    let w = workspace();
    let out = refine_once("galaxy,planet", &w.data.join("vocab.txt"), "malformed");
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("--- raw completion ---"));
    assert!(stderr.contains("I am unable to summarize these words."));
}

#[test]
fn exported_topics_match_the_training_report() {
    let w = workspace();
    let out = w.root.join("topics.jsonl");
    ok(&[
        "export-topics",
        "--checkpoint",
        s(&w.run.join("checkpoint.json")),
        "--vocab",
        s(&w.data.join("vocab.txt")),
        "--records",
        s(&w.run.join("refinements.jsonl")),
        "--out",
        s(&out),
    ]);
    assert_eq!(fs::read(&out).unwrap(), fs::read(w.run.join("topics.jsonl")).unwrap());
    let first: Value = serde_json::from_str(fs::read_to_string(&out).unwrap().lines().next().unwrap()).unwrap();
    for key in ["topic", "label", "words", "probs", "confidence"] {
        assert!(first.get(key).is_some(), "{key}");
    }
}

#[test]
fn curves_flatten_metrics_to_long_format() {
    let w = workspace();
    let second = w.root.join("second");
    let cfg = write_config(&w.root, |c| c["seed"] = 8.into());
    train_into(&w.data, &cfg, &second);
    let out = w.root.join("curves.csv");
    ok(&[
        "emit-curves",
        "--metrics",
        s(&w.run.join("metrics.csv")),
        s(&second.join("metrics.csv")),
        "--run-id",
        "base",
        "seed8",
        "--out",
        s(&out),
    ]);
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "run_id,step,metric,value");
    assert_eq!(lines.len(), 1 + 2 * 30 * 5);

    // Round trip: every value of the base run is recoverable.
    let header = ["step", "ntm_loss", "refine_loss", "total_loss", "mean_confidence", "parse_success_rate"];
    for row in metrics_rows(&w.run.join("metrics.csv")) {
        for (metric, value) in header.iter().zip(&row).skip(1) {
            let line = format!("base,{},{metric},{value}", row[0]);
            assert!(lines.contains(&line.as_str()), "{line}");
        }
    }
}

#[test]
fn curves_reject_bad_input() {
    let w = workspace();
    let out = w.root.join("curves.csv");
    assert_eq!(run(&["emit-curves", "--out", s(&out)]).status.code(), Some(2));
    let bad = w.root.join("bad.csv");
    fs::write(&bad, "a,b\n1,2\n").unwrap();
    let r = run(&["emit-curves", "--metrics", s(&bad), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("bad.csv"));
    let r = run(&[
        "emit-curves",
        "--metrics",
        s(&w.run.join("metrics.csv")),
        "--run-id",
        "a",
        "b",
        "--out",
        s(&out),
    ]);
    assert_eq!(r.status.code(), Some(2));
}
