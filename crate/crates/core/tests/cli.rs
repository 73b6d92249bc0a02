mod common;

use std::path::Path;

use common::{run, run_ok, s, small_config, write_config};
use speakerkws::model::Checkpoint;

fn gen_corpus(root: &Path, steps: u64) -> std::path::PathBuf {
    let corpus = root.join("corpus");
    let cfg = write_config(root, &small_config(&corpus, steps));
    run_ok(&["gen-data", "--config", s(&cfg)]);
    cfg
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &small_config(&tmp.path().join("unused"), 1));
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let stdout = run_ok(&["gen-data", "--config", s(&cfg), "--out", s(&a)]);
    assert!(stdout.contains("speakers B/child: 3"), "{stdout}");
    run_ok(&["gen-data", "--config", s(&cfg), "--out", s(&b)]);
    for f in ["manifest.jsonl", "speakers.jsonl", "enrollments.jsonl", "config.json", "features/s0000.kwt"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f}");
    }
    let c = tmp.path().join("c");
    run_ok(&["gen-data", "--config", s(&cfg), "--out", s(&c), "--seed", "99"]);
    assert_ne!(read(&a.join("features/s0000.kwt")), read(&c.join("features/s0000.kwt")));
}

#[test]
fn undersized_cell_is_a_config_error_naming_the_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(&tmp.path().join("corpus"), 1);
    let cell = cfg
        .corpus
        .cells
        .iter_mut()
        .find(|c| c.locale.as_str() == "B" && c.age_group.as_str() == "child")
        .unwrap();
    cell.speakers = 1;
    let path = write_config(tmp.path(), &cfg);
    let out = run(&["gen-data", "--config", s(&path)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("(B, child)"), "{err}");
}

#[test]
fn unknown_config_key_and_bad_flag_are_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.json");
    std::fs::write(&path, r#"{"seed": 1, "typo": true}"#).unwrap();
    assert_eq!(run(&["gen-data", "--config", s(&path)]).status.code(), Some(2));
    assert_eq!(run(&["train", "--variant", "nonsense"]).status.code(), Some(2));
    let missing = tmp.path().join("nope");
    assert_eq!(run(&["train", "--corpus", s(&missing)]).status.code(), Some(3));
}

#[test]
fn baseline_train_eval_report_and_stream_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = gen_corpus(root, 12);
    let run_dir = root.join("baseline");
    let stdout = run_ok(&["train", "--config", s(&cfg), "--variant", "baseline", "--out", s(&run_dir)]);
    assert!(stdout.contains("trained baseline to step 12"), "{stdout}");
    let metrics = String::from_utf8(read(&run_dir.join("metrics.csv"))).unwrap();
    assert!(metrics.starts_with("step,train_loss,dev_eer,wall_ms\n"));
    assert_eq!(metrics.lines().count(), 13);
    let ck = run_dir.join("final.kwt");

    let with = root.join("eval_with");
    let without = root.join("eval_without");
    let t_with = run_ok(&["eval", "--config", s(&cfg), "--checkpoint", s(&ck), "--out", s(&with)]);
    let t_without = run_ok(&[
        "eval", "--config", s(&cfg), "--checkpoint", s(&ck), "--condition", "without", "--out", s(&without),
    ]);
    assert!(t_with.contains("EER"), "{t_with}");
    let report = |d: &Path| -> serde_json::Value { serde_json::from_slice(&read(&d.join("report.json"))).unwrap() };
    let (rw, ro) = (report(&with), report(&without));
    assert_eq!(rw["overall"]["eer"], ro["overall"]["eer"], "{t_with}\n{t_without}");
    assert!(rw["overall"]["eer"].as_f64().is_some());
    let det = String::from_utf8(read(&with.join("det.csv"))).unwrap();
    assert!(det.starts_with("threshold,far,frr,probit_far,probit_frr\n"));

    // The streaming path must reproduce the batch score of an eval utterance.
    let scores = String::from_utf8(read(&with.join("scores.csv"))).unwrap();
    let mut lines = scores.lines();
    assert_eq!(lines.next().unwrap(), "utterance_id,speaker_id,locale,age_group,polarity,condition,score");
    for row in lines.take(3) {
        let fields: Vec<&str> = row.split(',').collect();
        let batch: f64 = fields[6].parse().unwrap();
        let stream = run_ok(&["stream-infer", "--config", s(&cfg), "--checkpoint", s(&ck), "--utterance", fields[0]]);
        assert!(stream.starts_with("frame,keyword_posterior\n"));
        let last = stream.lines().last().unwrap();
        let streamed: f64 = last.strip_prefix("score,").unwrap().parse().unwrap();
        assert!((batch - streamed).abs() <= 1e-6, "{}: {batch} vs {streamed}", fields[0]);
    }

    // A run compared with itself improves by exactly zero.
    let cmp = root.join("cmp");
    let table = run_ok(&["report", s(&with), s(&with), "--baseline", s(&with), "--out", s(&cmp)]);
    assert!(table.contains("eval_with"), "{table}");
    let merged: serde_json::Value = serde_json::from_slice(&read(&cmp.join("comparison.json"))).unwrap();
    for entry in merged.as_array().unwrap() {
        assert_eq!(entry["report"]["overall"]["relative_improvement"].as_f64(), Some(0.0), "{entry}");
    }
}

#[test]
fn report_refuses_runs_from_different_corpora() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = gen_corpus(root, 2);
    run_ok(&["train", "--config", s(&cfg), "--out", s(&root.join("r"))]);
    let ck = root.join("r/final.kwt");
    run_ok(&["eval", "--config", s(&cfg), "--checkpoint", s(&ck), "--out", s(&root.join("e1"))]);
    let other = root.join("corpus2");
    run_ok(&["gen-data", "--config", s(&cfg), "--seed", "5", "--out", s(&other)]);
    run_ok(&[
        "eval", "--config", s(&cfg), "--corpus", s(&other), "--checkpoint", s(&ck), "--out", s(&root.join("e2")),
    ]);
    let out = run(&["report", s(&root.join("e1")), s(&root.join("e2"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("different corpora"));
}

#[test]
fn td_cross_trains_and_both_conditions_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = gen_corpus(root, 6);
    let run_dir = root.join("td");
    run_ok(&[
        "train", "--config", s(&cfg), "--variant", "td_cross", "--robust-prob", "0.5", "--out", s(&run_dir),
    ]);
    let ck = Checkpoint::load(&run_dir.join("final.kwt")).unwrap();
    assert_eq!(ck.meta["variant"], "td_cross");
    assert_eq!(ck.model.embedding_dim(), Some(64));
    for cond in ["with", "without"] {
        let out = root.join(cond);
        run_ok(&[
            "eval", "--config", s(&cfg), "--checkpoint", s(&run_dir.join("final.kwt")), "--condition", cond,
            "--out", s(&out),
        ]);
        assert!(out.join("report.json").exists());
    }
    let stream = bin_stream_without_enrollment(&cfg, &run_dir.join("final.kwt"), root);
    assert!(stream.contains("constant vector"), "{stream}");
}

fn bin_stream_without_enrollment(cfg: &Path, ck: &Path, root: &Path) -> String {
    let corpus = speakerkws::data::Corpus::load(&root.join("corpus")).unwrap();
    let u = &corpus.utterances[0];
    let path = root.join("x.kwt");
    let tensors = [("x".to_string(), &u.features.frames)];
    speakerkws::archive::write(&path, &serde_json::json!({}), &tensors).unwrap();
    let out = run(&["stream-infer", "--config", s(cfg), "--checkpoint", s(ck), "--features", s(&path)]);
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().count(), u.features.num_frames() + 2);
    String::from_utf8(out.stderr).unwrap()
}

#[test]
fn interrupted_training_resumes_to_identical_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = gen_corpus(root, 10);
    let full = root.join("full");
    let part = root.join("part");
    for (variant, p) in [("baseline", "0"), ("td_cross", "0.5")] {
        run_ok(&["train", "--config", s(&cfg), "--variant", variant, "--robust-prob", p, "--out", s(&full)]);
        run_ok(&[
            "train", "--config", s(&cfg), "--variant", variant, "--robust-prob", p, "--stop-at", "4", "--out",
            s(&part),
        ]);
        assert_eq!(Checkpoint::load(&part.join("final.kwt")).unwrap().step, 4);
        run_ok(&[
            "train", "--config", s(&cfg), "--variant", variant, "--robust-prob", p, "--resume",
            s(&part.join("final.kwt")), "--out", s(&part),
        ]);
        let a = Checkpoint::load(&full.join("final.kwt")).unwrap();
        let b = Checkpoint::load(&part.join("final.kwt")).unwrap();
        assert_eq!(a.step, 10);
        assert_eq!(b.step, 10);
        assert_eq!(a.loss_history, b.loss_history, "{variant}");
        assert_eq!(a.model.param_tensors(), b.model.param_tensors(), "{variant}");
        let rows = |d: &Path| String::from_utf8(read(&d.join("metrics.csv"))).unwrap().lines().count();
        assert_eq!(rows(&full), rows(&part));
    }
}

#[test]
fn empty_split_fails_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = gen_corpus(root, 1);
    run_ok(&["train", "--config", s(&cfg), "--out", s(&root.join("r"))]);
    let manifest = root.join("corpus/manifest.jsonl");
    let text = String::from_utf8(read(&manifest)).unwrap();
    let kept: String = text.lines().filter(|l| !l.contains("\"split\":\"eval\"")).map(|l| format!("{l}\n")).collect();
    assert!(kept.len() < text.len());
    std::fs::write(&manifest, kept).unwrap();
    let out = run(&["eval", "--config", s(&cfg), "--checkpoint", s(&root.join("r/final.kwt")), "--out", s(&root.join("e"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty"));
}

#[test]
fn stream_infer_accepts_a_wav_file() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = gen_corpus(root, 1);
    run_ok(&["train", "--config", s(&cfg), "--out", s(&root.join("r"))]);
    let wav = root.join("tone.wav");
    let spec = hound::WavSpec { channels: 1, sample_rate: 16000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut w = hound::WavWriter::create(&wav, spec).unwrap();
    for i in 0..16000 {
        let t = i as f64 / 16000.0;
        w.write_sample((8000.0 * (2.0 * std::f64::consts::PI * 1000.0 * t).sin()) as i16).unwrap();
    }
    w.finalize().unwrap();
    let stdout = run_ok(&["stream-infer", "--config", s(&cfg), "--checkpoint", s(&root.join("r/final.kwt")), "--wav", s(&wav)]);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 98 + 2);
    for l in &lines[1..lines.len() - 1] {
        let p: f64 = l.split(',').nth(1).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&p));
    }
}

#[test]
fn selftest_passes() {
    let stdout = run_ok(&["selftest", "--seed", "3"]);
    assert!(stdout.contains("checks passed"), "{stdout}");
    assert!(!stdout.contains("FAIL"));
}
