#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use speakerkws::cli::RunConfig;

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_speakerkws"));
    c.env("KWS_LOG_LEVEL", "error");
    c
}

/// Runs the CLI and returns its output, with stderr attached to failures.
pub fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn speakerkws");
    if !out.status.success() {
        eprintln!("speakerkws {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

pub fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "speakerkws {args:?} exited with {:?}", out.status.code());
    String::from_utf8(out.stdout).unwrap()
}

/// A corpus and training setup small enough for a debug test run.
pub fn small_config(corpus_dir: &Path, steps: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    for c in &mut cfg.corpus.cells {
        c.speakers = if c.underrepresented { 3 } else { 4 };
    }
    cfg.corpus.positives_per_speaker = 3;
    cfg.corpus.negatives_per_speaker = 3;
    cfg.corpus.augment_copies = 1;
    cfg.corpus_dir = corpus_dir.to_path_buf();
    cfg.train.steps = steps;
    cfg.train.batch_size = 4;
    cfg.train.eval_every = 0;
    cfg
}

pub fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
