use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn sample(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/sample").join(name)
}

fn modgpt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_modgpt")).args(args).output().unwrap()
}

fn ok_json(args: &[&str]) -> Value {
    let out = modgpt(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: [&str; 8] = ["--d-model", "16", "--layers", "1", "--heads", "2", "--d-ff", "32"];

fn train_tiny(corpus: &Path, out_dir: &Path, extra: &[&str]) -> Value {
    let mut args = vec!["train", "--corpus", p(corpus), "--out-dir", p(out_dir), "--seed", "7", "--max-steps", "6", "--batch-size", "4"];
    args.extend(TINY);
    args.extend(extra);
    ok_json(&args)
}

#[test]
fn stats_matches_hand_count() {
    let got = ok_json(&["stats", "--corpus", p(&sample("corpus.jsonl")), "--format", "json"]);
    let want: Value = serde_json::from_str(&std::fs::read_to_string(sample("stats.json")).unwrap()).unwrap();
    assert_eq!(got, want);

    let out = modgpt(&["stats", "--corpus", p(&sample("corpus.jsonl"))]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("20"));
}

#[test]
fn train_twice_gives_identical_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let sa = train_tiny(&sample("corpus.jsonl"), &a, &[]);
    let sb = train_tiny(&sample("corpus.jsonl"), &b, &[]);
    assert_eq!(sa, sb);
    assert_eq!(sa["steps"], 6);
    let la = std::fs::read(a.join("metrics.jsonl")).unwrap();
    assert!(!la.is_empty());
    assert_eq!(la, std::fs::read(b.join("metrics.jsonl")).unwrap());
    assert_eq!(std::fs::read(a.join("final.ckpt")).unwrap(), std::fs::read(b.join("final.ckpt")).unwrap());
}

#[test]
fn split_train_eval_generate() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    assert!(modgpt(&["synth", "--dialogues", "60", "--memes", "8", "--out-dir", p(&data)]).status.success());
    let split = ok_json(&[
        "split", "--corpus", p(&data.join("corpus.jsonl")), "--seed", "1", "--reserve", "3",
        "--ratios", "0.6,0.2,0.1,0.1", "--out-dir", p(&data),
    ]);
    assert!(!split["train_memes"].as_array().unwrap().contains(&Value::from(3)));

    train_tiny(&data.join("train.jsonl"), &run, &["--valid", p(&data.join("valid.jsonl")), "--epochs", "1"]);
    assert!(run.join("best.ckpt").is_file());

    let report = ok_json(&[
        "eval", "--checkpoint", "best", "--run-dir", p(&run), "--suite", "easy", "--data-dir", p(&data),
    ]);
    assert!(report["perplexity"].as_f64().unwrap() > 1.0);
    assert!(report.get("seen_unseen").is_some());

    let reply = ok_json(&[
        "generate", "--checkpoint", p(&run.join("final.ckpt")), "--catalog", p(&data.join("catalog.json")),
        "--history", "hello there", "--history", "meme:2", "--history", "meme:1 ok", "--max-new-tokens", "4",
    ]);
    let att = &reply["attention"];
    assert_eq!(att["tokens"].as_array().unwrap().len(), att["weights"].as_array().unwrap().len());
    let sum: f64 = att["weights"].as_array().unwrap().iter().map(|w| w.as_f64().unwrap()).sum();
    assert!((sum - 1.0).abs() < 1e-4, "{sum}");
}

fn error_line(out: &Output) -> String {
    assert_eq!(out.status.code(), Some(1), "stdout: {}", String::from_utf8_lossy(&out.stdout));
    let err = String::from_utf8_lossy(&out.stderr).to_string();
    assert_eq!(err.lines().count(), 1, "{err}");
    err.trim_end().to_string()
}

#[test]
fn errors_are_one_machine_readable_line() {
    let line = error_line(&modgpt(&["stats", "--corpus", "/nonexistent/corpus.jsonl"]));
    assert!(line.starts_with("error: io: "), "{line}");

    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("corpus.jsonl");
    std::fs::copy(sample("catalog.json"), tmp.path().join("catalog.json")).unwrap();
    std::fs::write(&bad, "{\"utterances\": [{\"speaker\": 1, \"text\": \"hi\", \"meme_id\": 99}, {\"speaker\": 2, \"text\": \"yo\"}]}\n").unwrap();
    let line = error_line(&modgpt(&["stats", "--corpus", p(&bad)]));
    assert!(line.starts_with("error: dangling_meme: "), "{line}");

    std::fs::write(&bad, "not json\n").unwrap();
    let line = error_line(&modgpt(&["stats", "--corpus", p(&bad)]));
    assert!(line.starts_with("error: "), "{line}");

    let line = error_line(&modgpt(&["eval", "--checkpoint", p(&bad), "--suite", "nope"]));
    assert!(line.starts_with("error: "), "{line}");
}

#[test]
fn bad_usage_exits_nonzero_with_usage_text() {
    let out = modgpt(&["stats", "--no-such-flag"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}
