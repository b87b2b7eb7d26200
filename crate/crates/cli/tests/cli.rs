use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
[model]
d_model = 8
num_layers = 1
local_heads = 1
global_heads = 1
dropout = 0.0
max_items = 4
num_neighbors = 1

[train]
batch_size = 8
max_epochs = 1
recall_negatives = 100
workers = 1

[synth]
num_skills = 6
num_titles = 3
num_jds = 120
num_users = 120
items_min = 2
items_max = 4
impressions_per_user = 6
"#;

fn skillrec(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skillrec"))
        .env_remove("SKILLREC_OUT")
        .env("RUST_LOG", "warn")
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn error_line(o: &Output) -> String {
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr).trim().to_string();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error kind="), "{err}");
    err
}

fn setup() -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, CONFIG).unwrap();
    (dir, cfg.to_str().unwrap().to_string())
}

#[test]
fn synth_then_validate_is_clean() {
    let (dir, cfg) = setup();
    let out = dir.path().join("run");
    ok(&skillrec(&out, &["--config", &cfg, "synth"]));
    let report: serde_json::Value = serde_json::from_str(&ok(&skillrec(&out, &["validate"]))).unwrap();
    assert_eq!(report["violations"].as_array().unwrap().len(), 0);
}

#[test]
fn synth_is_idempotent() {
    let (dir, cfg) = setup();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&skillrec(&a, &["--config", &cfg, "synth"]));
    ok(&skillrec(&b, &["--config", &cfg, "synth"]));
    for f in ["jds.jsonl", "users.jsonl", "clicks.jsonl", "vocab.txt", "truth.json", "config.toml"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn env_var_sets_output_directory() {
    let (dir, cfg) = setup();
    let target = dir.path().join("from_env");
    let o = Command::new(env!("CARGO_BIN_EXE_skillrec"))
        .env("SKILLREC_OUT", &target)
        .env("RUST_LOG", "warn")
        .args(["--config", &cfg, "synth"])
        .output()
        .unwrap();
    ok(&o);
    assert!(target.join("jds.jsonl").exists());
}

#[test]
fn pipeline_reports_and_errors() {
    let (dir, cfg) = setup();
    let out = dir.path().join("run");
    let o = out.to_str().unwrap();
    ok(&skillrec(&out, &["--config", &cfg, "synth"]));
    ok(&skillrec(&out, &["--config", &cfg, "train-recall"]));
    let first = std::fs::read(out.join("recall.ckpt")).unwrap();
    ok(&skillrec(&out, &["--config", &cfg, "train-recall"]));
    assert_eq!(first, std::fs::read(out.join("recall.ckpt")).unwrap());

    let recall = format!("{o}/recall.ckpt");
    let s = ok(&skillrec(&out, &["eval-recall", "--checkpoint", &recall, "--k", "20,40,60,80,100"]));
    let v: serde_json::Value = serde_json::from_str(&s).unwrap();
    let metrics = v["metrics"].as_array().unwrap();
    let values: usize = metrics
        .iter()
        .map(|m| ["recall", "ndcg"].iter().filter(|f| m[**f].is_f64()).count())
        .sum();
    assert_eq!(values, 10);
    assert!(out.join("candidates.jsonl").exists());

    ok(&skillrec(&out, &["--config", &cfg, "train-rank", "--recall", &recall]));
    let rank = format!("{o}/rank.ckpt");
    let s = ok(&skillrec(&out, &["eval-rank", "--checkpoint", &rank, "--recall", &recall]));
    let v: serde_json::Value = serde_json::from_str(&s).unwrap();
    assert!(v["report"]["auc"].is_f64());

    let s = ok(&skillrec(&out, &["recommend", "--recall", &recall, "--rank", &rank, "--user", "u00001", "--k", "5"]));
    let v: serde_json::Value = serde_json::from_str(&s).unwrap();
    assert_eq!(v["jobs"].as_array().unwrap().len(), 5);

    let err = error_line(&skillrec(&out, &["recommend", "--recall", &recall, "--rank", &rank, "--user", "nobody-42"]));
    assert!(err.contains("kind=not_found") && err.contains("nobody-42"), "{err}");

    // Stage mismatch: a rank checkpoint where a recall one is expected.
    let err = error_line(&skillrec(&out, &["eval-recall", "--checkpoint", &rank]));
    assert!(err.contains("kind=checkpoint"), "{err}");
}

#[test]
fn bad_inputs_give_one_line_errors() {
    let (dir, _) = setup();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[model]\nwidth = 3\n").unwrap();
    let out = dir.path().join("run");
    let err = error_line(&skillrec(&out, &["--config", bad.to_str().unwrap(), "synth"]));
    assert!(err.contains("kind=config") && err.contains("width"), "{err}");

    let err = error_line(&skillrec(&out, &["validate", "--data", dir.path().join("missing").to_str().unwrap()]));
    assert!(err.contains("kind=io"), "{err}");

    let err = error_line(&skillrec(&out, &["no-such-command"]));
    assert!(err.contains("kind=usage"), "{err}");
}
