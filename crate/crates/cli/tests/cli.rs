use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn progtrig(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_progtrig")).args(args).output().expect("spawn progtrig")
}

fn ok(args: &[&str]) -> Output {
    let out = progtrig(args);
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

fn small_corpus(dir: &Path, seed: &str) {
    ok(&[
        "gen-data",
        "--seed",
        seed,
        "--out",
        s(dir),
        "--n-positive",
        "12",
        "--n-negative",
        "6",
        "--timeline-hours",
        "0.005",
    ]);
}

#[test]
fn missing_config_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = progtrig(&["gen-data", "--config", s(&missing), "--out", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.json"));
}

#[test]
fn help_lists_defaults() {
    let out = ok(&["train", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for needle in ["0.0008", "20", "3000", "--resume"] {
        assert!(text.contains(needle), "missing {needle} in:\n{text}");
    }
    let out = ok(&["calibrate-evaluate", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for needle in ["0.03", "0.01", "50"] {
        assert!(text.contains(needle), "missing {needle} in:\n{text}");
    }
}

#[test]
fn same_seed_gives_identical_corpora() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    small_corpus(&a, "7");
    small_corpus(&b, "7");
    let manifest_a = fs::read(a.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest_a, fs::read(b.join("manifest.jsonl")).unwrap());
    let first = String::from_utf8(manifest_a).unwrap();
    let wav = first
        .lines()
        .find_map(|l| l.split('"').skip_while(|f| *f != "path").nth(2).map(str::to_string))
        .unwrap();
    assert_eq!(fs::read(a.join(&wav)).unwrap(), fs::read(b.join(&wav)).unwrap());
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let out = dir.path().join("run");
    small_corpus(&corpus, "3");

    // Zero steps: the initial checkpoint is written as is.
    let init = dir.path().join("init");
    ok(&["train", "--out", s(&init), "--corpus", s(&corpus), "--max-steps", "0"]);
    assert!(init.join("model.ckpt").exists());
    let log = fs::read_to_string(init.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1);

    ok(&["train", "--out", s(&out), "--corpus", s(&corpus), "--max-steps", "5", "--batch-size", "4"]);
    let log = fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "step,phonetic_loss,disc_loss,grad_norm_preclip");
    assert_eq!(log.lines().count(), 6);

    let ckpt = out.join("model.ckpt");
    ok(&["score", "--out", s(&out), "--corpus", s(&corpus), "--checkpoint", s(&ckpt), "--no-timeline", "--contexts", "0.3,1"]);
    let scores = fs::read_to_string(out.join("scores.csv")).unwrap();
    let manifest = fs::read_to_string(corpus.join("manifest.jsonl")).unwrap();
    let test_items = manifest.lines().filter(|l| l.contains("\"test\"")).count();
    // Candidates times contexts, where the early and late contexts join the list.
    assert_eq!(scores.lines().count() - 1, test_items * 3);

    ok(&["score", "--out", s(&out), "--corpus", s(&corpus), "--checkpoint", s(&ckpt)]);
    ok(&["calibrate-evaluate", "--out", s(&out), "--corpus", s(&corpus)]);
    for f in ["thresholds.json", "policy_report.json", "evaluation.json", "decisions.csv", "artifacts.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    ok(&[
        "simulate-stream",
        "--out",
        s(&out),
        "--corpus",
        s(&corpus),
        "--checkpoint",
        s(&ckpt),
        "--thresholds",
        s(&out.join("thresholds.json")),
    ]);
    assert!(out.join("stream_report.json").exists());
}

#[test]
fn unknown_utterance_id_fails() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    small_corpus(&corpus, "5");
    ok(&["train", "--out", s(dir.path()), "--corpus", s(&corpus), "--max-steps", "0"]);
    let out = progtrig(&[
        "score",
        "--out",
        s(dir.path()),
        "--corpus",
        s(&corpus),
        "--checkpoint",
        s(&dir.path().join("model.ckpt")),
        "--ids",
        "no-such-utterance",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no-such-utterance"));
}
