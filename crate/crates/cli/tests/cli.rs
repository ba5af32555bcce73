use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_make-vlp"));
    c.env_remove("MAKE_OUT_DIR");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small corpus and the flags of a model that trains on it in seconds.
fn small_corpus(dir: &Path) -> PathBuf {
    let out = dir.join("data");
    let o = run(&["synth", "--classes", "3", "--per-class", "10", "--image-size", "16", "--out-dir", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

const TINY: [&str; 12] = ["--image-size", "16", "--embed-dim", "16", "--depth", "1", "--heads", "2", "--vocab-size", "256", "--context-length", "16"];

fn train_args<'a>(manifest: &'a str, out: &'a str) -> Vec<&'a str> {
    train_epochs(manifest, out, "2")
}

fn train_epochs<'a>(manifest: &'a str, out: &'a str, epochs: &'a str) -> Vec<&'a str> {
    let mut v = vec!["train", "--train-manifest", manifest, "--out-dir", out, "--epochs", epochs, "--batch-size", "8", "--warmup-steps", "2", "--k-max", "2"];
    v.extend(TINY);
    v
}

#[test]
fn synth_writes_split_manifests_deterministically() {
    let dir = TempDir::new().unwrap();
    let o = run(&["synth", "--out-dir", s(&dir.path().join("a"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let lines = |p: PathBuf| std::fs::read_to_string(p).unwrap().lines().count();
    assert_eq!(lines(dir.path().join("a/train.jsonl")), 320);
    assert_eq!(lines(dir.path().join("a/eval.jsonl")), 80);
    run(&["synth", "--out-dir", s(&dir.path().join("b"))]);
    for f in ["train.jsonl", "eval.jsonl", "provenance.json"] {
        assert_eq!(std::fs::read(dir.path().join("a").join(f)).unwrap(), std::fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
    }
    let prov: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("a/provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["config_hash"].as_str().unwrap().len(), 16);
}

#[test]
fn synth_rejects_a_single_class() {
    let dir = TempDir::new().unwrap();
    let o = run(&["synth", "--classes", "1", "--out-dir", s(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("synth.classes"), "{}", stderr(&o));
}

#[test]
fn env_out_dir_is_used_and_flag_wins() {
    let dir = TempDir::new().unwrap();
    let env_dir = dir.path().join("env");
    let o = bin().args(["synth", "--classes", "2", "--per-class", "5"]).env("MAKE_OUT_DIR", &env_dir).output().unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(env_dir.join("train.jsonl").is_file());
    let flag_dir = dir.path().join("flag");
    let o = bin().args(["synth", "--classes", "2", "--per-class", "5", "--out-dir", s(&flag_dir)]).env("MAKE_OUT_DIR", &env_dir).output().unwrap();
    assert_eq!(code(&o), 0);
    assert!(flag_dir.join("train.jsonl").is_file());
}

#[test]
fn config_file_keys_and_unknown_keys() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"synth.classes": 2, "synth.per_class": 5}"#).unwrap();
    let out = dir.path().join("o");
    let o = run(&["synth", "--config", s(&cfg), "--out-dir", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(out.join("train.jsonl")).unwrap().lines().count(), 8);

    std::fs::write(&cfg, r#"{"synth.colors": 2}"#).unwrap();
    let o = run(&["synth", "--config", s(&cfg), "--out-dir", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("synth.colors"));
}

#[test]
fn train_is_deterministic_and_logs_per_flags() {
    let dir = TempDir::new().unwrap();
    let data = small_corpus(dir.path());
    let manifest = data.join("train.jsonl");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let mut args = train_args(s(&manifest), s(out));
        args.extend(["--seed", "1"]);
        let o = run(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).contains("loss_total"));
    }
    for f in ["metrics.jsonl", "final.ckpt", "epoch_001.ckpt", "epoch_002.ckpt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert!(std::fs::read_to_string(a.join("metrics.jsonl")).unwrap().contains("loss_slra"));

    let c = dir.path().join("c");
    let mut args = train_args(s(&manifest), s(&c));
    args.extend(["--enable-slra", "false"]);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = std::fs::read_to_string(c.join("metrics.jsonl")).unwrap();
    assert!(!log.is_empty() && !log.contains("loss_slra"));
}

#[test]
fn train_resume_matches_uninterrupted_run() {
    let dir = TempDir::new().unwrap();
    let data = small_corpus(dir.path());
    let manifest = data.join("train.jsonl");
    let full = dir.path().join("full");
    assert_eq!(code(&run(&train_args(s(&manifest), s(&full)))), 0);
    let half = dir.path().join("half");
    assert_eq!(code(&run(&train_epochs(s(&manifest), s(&half), "1"))), 0);
    let resumed = dir.path().join("resumed");
    let ckpt = half.join("final.ckpt");
    let mut args = train_args(s(&manifest), s(&resumed));
    args.extend(["--resume", s(&ckpt)]);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read(full.join("final.ckpt")).unwrap(), std::fs::read(resumed.join("final.ckpt")).unwrap());
}

#[test]
fn train_missing_manifest_is_io_error() {
    let dir = TempDir::new().unwrap();
    let o = run(&["train", "--train-manifest", s(&dir.path().join("nope.jsonl")), "--out-dir", s(dir.path())]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).starts_with("error: "));
}

#[test]
fn eval_prints_table_and_detects_dimension_mismatch() {
    let dir = TempDir::new().unwrap();
    let data = small_corpus(dir.path());
    let run_dir = dir.path().join("run");
    assert_eq!(code(&run(&train_args(s(&data.join("train.jsonl")), s(&run_dir)))), 0);
    let ckpt = run_dir.join("final.ckpt");
    let eval = data.join("eval.jsonl");
    let out = dir.path().join("ev");
    let o = run(&["eval", "--checkpoint", s(&ckpt), "--eval-manifest", s(&eval), "--out-dir", s(&out), "--ks", "1,5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    let acc = text.lines().find(|l| l.starts_with("accuracy")).expect("accuracy row");
    let value = acc.split_whitespace().last().unwrap();
    assert_eq!(value.split('.').nth(1).unwrap().len(), 4, "{acc}");
    let v: f64 = value.parse().unwrap();
    assert!((0.0..=1.0).contains(&v));
    for dir in ["image-to-text", "text-to-image"] {
        assert_eq!(text.lines().filter(|l| l.starts_with(dir)).count(), 2, "{text}");
    }
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("eval_report.json")).unwrap()).unwrap();
    assert!(report["fingerprint"].is_string());

    let o = run(&["eval", "--checkpoint", s(&ckpt), "--eval-manifest", s(&eval), "--out-dir", s(&out), "--embed-dim", "32"]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));

    let o = run(&["eval", "--checkpoint", s(&dir.path().join("missing.ckpt")), "--eval-manifest", s(&eval), "--out-dir", s(&out)]);
    assert_eq!(code(&o), 3);
}

#[test]
fn gradcheck_exit_status_follows_the_check() {
    let dir = TempDir::new().unwrap();
    let d = s(dir.path());
    let o = run(&["gradcheck", "--out-dir", d]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("\"pass\":true"));
    assert_eq!(code(&run(&["gradcheck", "--tol", "10", "--out-dir", d])), 0);
    assert_eq!(code(&run(&["gradcheck", "--tol", "10", "--eps", "1e-9", "--out-dir", d])), 0);
    assert_eq!(code(&run(&["gradcheck", "--eps", "1e-9", "--out-dir", d])), 1);
    assert_eq!(code(&run(&["gradcheck", "--eps", "1e-9", "--precision", "f32", "--out-dir", d])), 1);
    assert_eq!(code(&run(&["gradcheck", "--eps", "0", "--out-dir", d])), 2);
}

#[test]
fn ablate_writes_a_five_row_table() {
    let dir = TempDir::new().unwrap();
    let data = small_corpus(dir.path());
    let out = dir.path().join("ab");
    let (train, eval) = (data.join("train.jsonl"), data.join("eval.jsonl"));
    let mut args = vec!["ablate", "--train-manifest", s(&train), "--eval-manifest", s(&eval), "--out-dir", s(&out), "--seeds", "1", "--epochs", "1", "--batch-size", "8"];
    args.extend(TINY);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "row,flags,acc_mean,acc_sd,auroc_mean,auroc_sd,seeds");
    assert_eq!(lines.len(), 6);
    for (line, row) in lines[1..].iter().zip(["baseline", "mkcl#", "mkcl", "mkcl+slra", "mkcl+slra+dkw"]) {
        assert!(line.starts_with(&format!("{row},")), "{line}");
        assert_eq!(line.split(',').count(), 7);
    }
    assert!(stdout(&o).contains("rank"));
}

#[test]
fn help_lists_flags_with_defaults() {
    for (cmd, flags) in [
        ("synth", &["--classes", "--per-class", "--seed", "--out-dir", "--config"][..]),
        ("train", &["--epochs", "--batch-size", "--learning-rate", "--enable-slra", "--resume", "--seed"][..]),
        ("eval", &["--checkpoint", "--tasks", "--ks", "--prompt"][..]),
        ("gradcheck", &["--eps", "--tol", "--trials", "--precision"][..]),
        ("ablate", &["--seeds", "--threads", "--epochs"][..]),
    ] {
        let o = run(&[cmd, "--help"]);
        assert_eq!(code(&o), 0);
        let text = stdout(&o);
        for f in flags {
            assert!(text.contains(f), "{cmd} help lacks {f}");
        }
        assert!(text.contains("[default: "), "{cmd} help shows no defaults");
    }
    assert!(stdout(&run(&["--help"])).contains("gradcheck"));
}
