use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn are(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_are")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn error_line(o: &Output) -> Value {
    let text = String::from_utf8(o.stderr.clone()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1, "{text}");
    serde_json::from_str(lines[0]).unwrap()
}

/// Four balanced classes. With `keyed` each class is marked by its own two
/// keywords among shared fillers; otherwise the text says nothing about it.
fn write_corpus(path: &Path, per_class: usize, seed: u64, keyed: bool) {
    let fillers = ["the", "a", "of", "and", "to", "it", "was", "very"];
    let mut state = seed;
    let mut next = move |m: usize| {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 33) as usize) % m
    };
    let mut csv = String::new();
    for i in 0..per_class * 4 {
        let class = i % 4;
        let mut words: Vec<String> = (0..5).map(|_| fillers[next(fillers.len())].to_string()).collect();
        let key = if keyed { class } else { next(4) };
        words.insert(next(6), format!("key{key}{}", ["a", "b"][next(2)]));
        csv.push_str(&format!("\"{}\",\"title {}\",\"{}\"\n", class + 1, fillers[next(8)], words.join(" ")));
    }
    fs::write(path, csv).unwrap();
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    train: String,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let train = root.join("train.csv");
    write_corpus(&train, 12, 1, true);
    Fixture { _dir: dir, train: train.display().to_string(), root }
}

const SMALL: &[&str] = &["--h", "8", "--region", "3", "--batch", "8", "--lr", "0.01", "--min-count", "1"];

fn train_into(f: &Fixture, name: &str, extra: &[&str]) -> (PathBuf, Output) {
    let out = f.root.join(name);
    let mut args = vec!["train", "--train", &f.train];
    let out_s = out.display().to_string();
    args.extend(["--out", &out_s]);
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    let o = are(&args);
    (out, o)
}

fn metrics_without_time(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_ms");
            v
        })
        .collect()
}

#[test]
fn count_params_reference_values() {
    for (dataset, total) in [("ag", "16,268,804"), ("yahoo", "97,970,954")] {
        let o = are(&["count-params", "--dataset", dataset, "--method", "are"]);
        assert!(o.status.success());
        let text = stdout(&o);
        assert!(text.contains(&format!("reference     {total:>14}  MATCH")), "{text}");
    }
    let o = are(&["count-params", "--v", "1000", "--h", "4", "--region", "3", "--n", "2", "--method", "lre", "--json"]);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["breakdown"]["embedding"], 4000);
    assert_eq!(v["breakdown"]["context_unit"], 12000);
    assert_eq!(v["breakdown"]["fc"], 10);
    assert_eq!(v["breakdown"]["total"], 16010);
    assert_eq!(v["reference"], Value::Null);

    let o = are(&["count-params", "--dataset", "ag", "--method", "lre", "--h", "128", "--region", "7", "--json"]);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["reference"]["matches"], true);

    let o = are(&["count-params", "--method", "are"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_line(&o)["error"], "input");
}

#[test]
fn missing_data_file_names_the_path() {
    let f = fixture();
    let missing = f.root.join("absent.csv").display().to_string();
    let o = are(&["train", "--train", &missing, "--out", &f.root.join("o").display().to_string()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o)["message"].as_str().unwrap().contains(&missing));
}

#[test]
fn config_file_values_and_flag_precedence() {
    let f = fixture();
    let cfg = f.root.join("run.cfg");
    fs::write(&cfg, "method = lre\nh = 6\nregion = 5\n").unwrap();
    let cfg_s = cfg.display().to_string();
    let o = are(&["count-params", "--config", &cfg_s, "--v", "100", "--n", "2", "--json"]);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["spec"]["method"], "lre");
    assert_eq!(v["spec"]["h"], 6);
    let o = are(&["count-params", "--config", &cfg_s, "--v", "100", "--n", "2", "--h", "3", "--json"]);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["spec"]["h"], 3);

    fs::write(&cfg, "method = lre\nwidth = 6\n").unwrap();
    let o = are(&["count-params", "--config", &cfg_s, "--v", "100", "--n", "2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o)["message"].as_str().unwrap().contains("width"));
}

#[test]
fn identical_runs_and_snapshot_replay() {
    let f = fixture();
    let (a, o) = train_into(&f, "a", &["--epochs", "3", "--val-fraction", "0.25", "--eval-every", "2", "--seed", "5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (b, _) = train_into(&f, "b", &["--epochs", "3", "--val-fraction", "0.25", "--eval-every", "2", "--seed", "5"]);
    let log_a = metrics_without_time(&a.join("metrics.ndjson"));
    assert!(!log_a.is_empty());
    assert_eq!(log_a, metrics_without_time(&b.join("metrics.ndjson")));
    assert_eq!(fs::read(a.join("model.ckpt")).unwrap(), fs::read(b.join("model.ckpt")).unwrap());
    assert!(a.join("best.ckpt").exists() && a.join("vocab.txt").exists());

    // the snapshot alone reproduces the run, only the output moves
    let snapshot = a.join("config.txt").display().to_string();
    let c = f.root.join("c");
    let o = are(&["train", "--config", &snapshot, "--out", &c.display().to_string()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(log_a, metrics_without_time(&c.join("metrics.ndjson")));

    let (d, _) = train_into(&f, "d", &["--epochs", "3", "--val-fraction", "0.25", "--eval-every", "2", "--seed", "6"]);
    assert_ne!(log_a, metrics_without_time(&d.join("metrics.ndjson")));
}

#[test]
fn eval_reports_fit_and_rejects_mismatch() {
    let f = fixture();
    let (out, o) = train_into(&f, "fit", &["--epochs", "25", "--val-fraction", "0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = out.join("model.ckpt").display().to_string();
    let o = are(&["eval", "--checkpoint", &ckpt, "--test", &f.train]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["accuracy"], 1.0);
    let rows: Vec<u64> = v["confusion"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r.as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).sum())
        .collect();
    assert_eq!(rows, vec![12, 12, 12, 12]);

    let o = are(&["eval", "--checkpoint", &ckpt, "--test", &f.train, "--h", "16"]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_line(&o)["error"], "compatibility");

    let junk = f.root.join("junk.ckpt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let o = are(&["eval", "--checkpoint", &junk.display().to_string(), "--test", &f.train, "--vocab", &out.join("vocab.txt").display().to_string()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn fresh_model_is_near_chance() {
    let f = fixture();
    let big = f.root.join("balanced.csv");
    write_corpus(&big, 50, 9, false);
    let (out, o) = train_into(&f, "fresh", &["--lr", "1e-12", "--max-steps", "1", "--val-fraction", "0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = are(&["eval", "--checkpoint", &out.join("model.ckpt").display().to_string(), "--test", &big.display().to_string()]);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let acc = v["accuracy"].as_f64().unwrap();
    assert!((acc - 0.25).abs() <= 0.1, "{acc}");
}

#[test]
fn resume_continues_the_same_run() {
    let f = fixture();
    let args = ["--epochs", "2", "--val-fraction", "0", "--seed", "3"];
    let (full, _) = train_into(&f, "full", &args);
    let (part, o) = train_into(&f, "part", &[&args[..], &["--max-steps", "3"]].concat());
    assert!(o.status.success());
    let s: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(s["runs"][0]["finished"], false);
    let o = are(&["train", "--config", &part.join("config.txt").display().to_string(), "--resume", "--max-steps", "1000"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(full.join("model.ckpt")).unwrap(), fs::read(part.join("model.ckpt")).unwrap());
    assert_eq!(metrics_without_time(&full.join("metrics.ndjson")), metrics_without_time(&part.join("metrics.ndjson")));
}

#[test]
fn saliency_output() {
    let f = fixture();
    let (out, _) = train_into(&f, "sal", &["--epochs", "2"]);
    let ckpt = out.join("model.ckpt").display().to_string();
    let o = are(&["saliency", "--checkpoint", &ckpt, "--text", "The key2a, was very unseen!"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let tokens: Vec<&str> = v["tokens"].as_array().unwrap().iter().map(|t| t.as_str().unwrap()).collect();
    assert_eq!(tokens, ["the", "key2a", ",", "was", "very", "unseen", "!"]);
    assert_eq!(v["scores"].as_array().unwrap().len(), tokens.len());

    let o = are(&["saliency", "--checkpoint", &ckpt, "--text", "a of the", "--format", "html"]);
    assert_eq!(stdout(&o).matches("<span").count(), 3);

    let o = are(&["saliency", "--checkpoint", &ckpt, "--text", "   "]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o)["message"].as_str().unwrap().contains("empty document"));

    let o = are(&["saliency", "--checkpoint", &ckpt, "--text", "a", "--format", "pdf"]);
    assert_eq!(o.status.code(), Some(2));
}
