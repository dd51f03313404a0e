use std::path::Path;
use std::process::{Command, Output};

fn chanlab(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chanlab"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

const TINY: &str = r#"
workers = 1
methods = [
    { kind = "scoring", method = "direct", mode = "zero-shot" },
]
[grid]
test_limit = 20
[bench]
pool_size = 200
test_size = 40
corpus_docs = 60
[bench.lm]
model_dim = 16
max_seq_len = 384
[bench.pretrain]
steps = 3
batch_size = 2
"#;

#[test]
fn verify_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = chanlab(&["verify"], dir.path());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{stdout}");
    assert!(stdout.contains("nine-cell oracle"));
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn report_on_empty_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = chanlab(&["report", "--out", "empty"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no results"));
}

#[test]
fn invalid_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "workers = 0\n").unwrap();
    let out = chanlab(&["eval-demo", "--config", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("workers"));
    std::fs::write(dir.path().join("typo.toml"), "[grid]\nkk = 1\n").unwrap();
    assert_eq!(chanlab(&["tune", "--config", "typo.toml"], dir.path()).status.code(), Some(1));
    assert_eq!(chanlab(&["ablate", "--kind", "sideways"], dir.path()).status.code(), Some(1));
    assert_eq!(chanlab(&["no-such-command"], dir.path()).status.code(), Some(1));
}

#[test]
fn zero_shot_eval_writes_four_rows_then_reports() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let out = chanlab(&["gen-task", "--config", "tiny.toml", "--out", "run"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("run/task/train.labels.json").exists());

    let out = chanlab(&["eval-demo", "--config", "tiny.toml", "--out", "run"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let results = std::fs::read_to_string(dir.path().join("run/eval-demo/results.jsonl")).unwrap();
    assert_eq!(results.lines().count(), 4);
    let first: serde_json::Value = serde_json::from_str(results.lines().next().unwrap()).unwrap();
    assert_eq!(first["mode"], "zero-shot");
    assert_eq!(first["config_hash"].as_str().unwrap().len(), 64);
    assert!(first["code_version"].as_str().unwrap().starts_with("chanlab "));
    assert!(dir.path().join("run/eval-demo/config.json").exists());
    let table = std::fs::read_to_string(dir.path().join("run/eval-demo/table.tsv")).unwrap();
    assert_eq!(table.lines().count(), 2);

    // single-verbalizer override, checkpoint reused
    let out = chanlab(&["eval-demo", "--config", "tiny.toml", "--out", "run", "--verbalizer", "v2"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let results = std::fs::read_to_string(dir.path().join("run/eval-demo/results.jsonl")).unwrap();
    assert_eq!(results.lines().count(), 1);
    assert!(results.contains("\"verbalizer\":\"v2\""));

    let out = chanlab(&["report", "--out", "run"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("direct zero-shot"));
    assert_eq!(chanlab(&["eval-demo", "--config", "tiny.toml", "--out", "run", "--verbalizer", "v9"], dir.path()).status.code(), Some(1));
}
