//! Command-line front end: `gen-data`, `train`, `eval`, `stream-infer`,
//! `report` and `selftest`.
//!
//! Settings come from a JSON [`RunConfig`]; flags override config keys,
//! which override defaults.

mod config;

pub use config::{EvalConfig, RunConfig, RESOLVED_CONFIG_FILE};

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::archive;
use crate::data::{
    corpus_fingerprint, extract_logmel, generate_corpus, stack_context, Corpus, Polarity, Split, MEL_BINS,
};
use crate::error::{KwsError, Result};
use crate::eval::{
    det_csv, det_curve, evaluate_split, render_comparison, scores_csv, split_scores, utterance_score,
    Condition, EvalReport, ScoringOptions,
};
use crate::model::{Checkpoint, KwsModel};
use crate::numerics::Tensor;
use crate::seed;
use crate::speaker::{constant_vector, pair_enrollment};
use crate::train::{checkpoint_variant, metrics_csv, train, Variant, METRICS_CSV_HEADER};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

pub const FINAL_CHECKPOINT: &str = "final.kwt";
pub const BEST_CHECKPOINT: &str = "best.kwt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SCORES_FILE: &str = "scores.csv";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const DET_FILE: &str = "det.csv";

/// Exit code class of an error.
pub fn exit_code(err: &KwsError) -> i32 {
    match err {
        KwsError::Config(_) | KwsError::Usage(_) | KwsError::ConfigMismatch(_) => EXIT_CONFIG,
        KwsError::Data(_)
        | KwsError::Io { .. }
        | KwsError::Corrupt { .. }
        | KwsError::VersionMismatch { .. }
        | KwsError::ShapeMismatch { .. }
        | KwsError::NoEnrollment(_)
        | KwsError::MissingEnrollments(_)
        | KwsError::Json(_) => EXIT_DATA,
        KwsError::Dimension { .. } | KwsError::Validation(_) | KwsError::NonFinite { .. } => EXIT_RUNTIME,
    }
}

#[derive(Debug, Parser)]
#[command(name = "speakerkws", version, about = "Speaker-conditioned streaming keyword spotting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct Common {
    /// JSON run config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: KwsError| e.to_string())
}

fn parse_condition(s: &str) -> std::result::Result<Condition, String> {
    match s {
        "with" => Ok(Condition::With),
        "without" => Ok(Condition::Without),
        _ => Err(format!("unknown condition `{s}` (with|without)")),
    }
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "dev" => Ok(Split::Dev),
        "eval" => Ok(Split::Eval),
        _ => Err(format!("unknown split `{s}` (train|dev|eval)")),
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus and enrollment store.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a variant on a generated corpus.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
        #[arg(long)]
        robust_prob: Option<f64>,
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from a checkpoint written by an earlier `train`.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many total steps, leaving a resumable checkpoint.
        #[arg(long)]
        stop_at: Option<u64>,
    },
    /// Score a split and write scores, DET points and the stratified report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_parser = parse_condition)]
        condition: Option<Condition>,
        #[arg(long, value_parser = parse_split)]
        split: Option<Split>,
    },
    /// Run the streaming detector frame by frame over one input.
    StreamInfer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Utterance id from the corpus; also selects its enrollment.
        #[arg(long)]
        utterance: Option<String>,
        /// Tensor archive holding a `[frames × dim]` feature tensor.
        #[arg(long)]
        features: Option<PathBuf>,
        /// Tensor name inside `--features` (defaults to the first tensor).
        #[arg(long)]
        key: Option<String>,
        /// 16 kHz mono WAV file.
        #[arg(long)]
        wav: Option<PathBuf>,
        /// Enrolled speaker whose embedding conditions the model.
        #[arg(long)]
        enroll_speaker: Option<String>,
        #[arg(long, value_parser = parse_condition)]
        condition: Option<Condition>,
    },
    /// Merge eval reports and compare against a baseline run.
    Report {
        /// Eval output directories.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Run directory to compare against (default: first baseline run).
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gradient, streaming-equivalence and identity self checks.
    Selftest {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("KWS_LOG_LEVEL", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let mut stdout = std::io::stdout().lock();
    match execute(cli.command, &mut stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    cfg.resolve_seeds();
    Ok(cfg)
}

fn out_err(e: std::io::Error) -> KwsError {
    KwsError::io(Path::new("<stdout>"), e)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| KwsError::io(path, e))
}

pub fn execute(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::GenData { common } => {
            let mut cfg = load_config(&common)?;
            if let Some(o) = common.out {
                cfg.corpus_dir = o;
            }
            cmd_gen_data(&cfg, out)
        }
        Command::Train {
            common,
            corpus,
            variant,
            robust_prob,
            steps,
            resume,
            stop_at,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(c) = corpus {
                cfg.corpus_dir = c;
            }
            if let Some(v) = variant {
                cfg.train.variant = v;
            }
            if let Some(p) = robust_prob {
                cfg.train.robust_prob = p;
            }
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            cmd_train(&cfg, resume.as_deref(), stop_at, out)
        }
        Command::Eval {
            common,
            corpus,
            checkpoint,
            condition,
            split,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(c) = corpus {
                cfg.corpus_dir = c;
            }
            if let Some(c) = checkpoint {
                cfg.eval.checkpoint = Some(c);
            }
            if let Some(c) = condition {
                cfg.eval.condition = c;
            }
            if let Some(s) = split {
                cfg.eval.split = s;
            }
            cmd_eval(&cfg, out)
        }
        Command::StreamInfer {
            common,
            checkpoint,
            corpus,
            utterance,
            features,
            key,
            wav,
            enroll_speaker,
            condition,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(c) = corpus {
                cfg.corpus_dir = c;
            }
            if let Some(c) = condition {
                cfg.eval.condition = c;
            }
            let input = match (utterance, features, wav) {
                (Some(u), None, None) => StreamInput::Utterance(u),
                (None, Some(f), None) => StreamInput::Features(f, key),
                (None, None, Some(w)) => StreamInput::Wav(w),
                _ => {
                    return Err(KwsError::Usage(
                        "give exactly one of --utterance, --features or --wav".into(),
                    ))
                }
            };
            cmd_stream_infer(&cfg, &checkpoint, input, enroll_speaker.as_deref(), out)
        }
        Command::Report { runs, baseline, out: dir } => cmd_report(&runs, baseline.as_deref(), dir.as_deref(), out),
        Command::Selftest { seed } => cmd_selftest(seed, out),
    }
}

pub fn cmd_gen_data(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let corpus = generate_corpus(&cfg.corpus)?;
    corpus.write(&cfg.corpus_dir)?;
    let mut cells: BTreeMap<String, usize> = BTreeMap::new();
    for s in &corpus.speakers {
        *cells.entry(format!("{}/{}", s.locale.as_str(), s.age_group.as_str())).or_default() += 1;
    }
    writeln!(out, "corpus written to {}", cfg.corpus_dir.display()).map_err(out_err)?;
    for (cell, n) in &cells {
        writeln!(out, "  speakers {cell}: {n}").map_err(out_err)?;
    }
    for split in Split::ALL {
        let count = |p: Polarity| corpus.split(split).filter(|u| u.record.polarity == p).count();
        writeln!(
            out,
            "  {split:?}: {} positive, {} negative (incl. augmented)",
            count(Polarity::Positive),
            count(Polarity::Negative)
        )
        .map_err(out_err)?;
    }
    writeln!(out, "  enrollments: {}", corpus.enrollments.len()).map_err(out_err)?;
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>, stop_at: Option<u64>, out: &mut dyn Write) -> Result<()> {
    let corpus = Corpus::load(&cfg.corpus_dir)?;
    let mut cfg = cfg.clone();
    if cfg.train.model.input_dim != corpus.config.feature_dim {
        log::info!(
            "model input_dim {} set to the corpus feature dim {}",
            cfg.train.model.input_dim,
            corpus.config.feature_dim
        );
        cfg.train.model.input_dim = corpus.config.feature_dim;
    }
    let resume_ck = resume.map(Checkpoint::load).transpose()?;
    cfg.write_resolved(&cfg.out_dir)?;
    let outcome = train(&corpus, &cfg.train, resume_ck, stop_at)?;
    let dir = &cfg.out_dir;
    outcome.checkpoint.save(&dir.join(FINAL_CHECKPOINT))?;
    if let Some((_, _, model)) = &outcome.best {
        let mut best = outcome.checkpoint.clone();
        best.model = model.clone();
        best.optimizer = None;
        best.save(&dir.join(BEST_CHECKPOINT))?;
    }
    let metrics_path = dir.join(METRICS_FILE);
    let csv = metrics_csv(&outcome.metrics);
    if resume.is_some() && metrics_path.exists() {
        let mut old = std::fs::read_to_string(&metrics_path).map_err(|e| KwsError::io(&metrics_path, e))?;
        old.push_str(csv.strip_prefix(METRICS_CSV_HEADER).unwrap_or(&csv).trim_start_matches('\n'));
        write_file(&metrics_path, &old)?;
    } else {
        write_file(&metrics_path, &csv)?;
    }
    let last = outcome.metrics.last();
    writeln!(
        out,
        "trained {} to step {}: final loss {}, best dev EER {}",
        cfg.train.variant.as_str(),
        outcome.checkpoint.step,
        last.map_or("n/a".into(), |m| format!("{:.5}", m.train_loss)),
        outcome.checkpoint.meta["best_dev_eer"]
            .as_f64()
            .map_or("n/a".into(), |e| format!("{:.2}%", 100.0 * e))
    )
    .map_err(out_err)?;
    Ok(())
}

fn scoring_options(cfg: &RunConfig) -> ScoringOptions {
    ScoringOptions {
        smooth_window: cfg.eval.smooth_window,
        seed: cfg.eval_seed(),
        missing_enrollment: cfg.eval.missing_enrollment,
    }
}

pub fn cmd_eval(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let ck_path = cfg
        .eval
        .checkpoint
        .as_ref()
        .ok_or_else(|| KwsError::Config("eval needs --checkpoint or eval.checkpoint".into()))?;
    let ck = Checkpoint::load(ck_path)?;
    let variant = checkpoint_variant(&ck)?;
    let corpus = Corpus::load(&cfg.corpus_dir)?;
    if corpus.originals(cfg.eval.split).next().is_none() {
        return Err(KwsError::Data(format!("the {:?} split is empty", cfg.eval.split)));
    }
    let (outcome, mut report) =
        evaluate_split(&ck.model, &corpus, cfg.eval.split, variant, cfg.eval.condition, &scoring_options(cfg))?;
    report.corpus_fingerprint = Some(corpus_fingerprint(&cfg.corpus_dir)?);
    let (pos, neg) = split_scores(&outcome.scores);
    let dir = &cfg.out_dir;
    cfg.write_resolved(dir)?;
    write_file(&dir.join(SCORES_FILE), &scores_csv(&outcome.scores))?;
    write_file(&dir.join(REPORT_JSON), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    let table = report.render_table("Evaluation");
    write_file(&dir.join(REPORT_TXT), &table)?;
    if !pos.is_empty() && !neg.is_empty() {
        write_file(&dir.join(DET_FILE), &det_csv(&det_curve(&pos, &neg)?))?;
    }
    write!(out, "{table}").map_err(out_err)?;
    Ok(())
}

pub enum StreamInput {
    Utterance(String),
    Features(PathBuf, Option<String>),
    Wav(PathBuf),
}

fn load_features(path: &Path, key: Option<&str>) -> Result<Tensor> {
    let mut a = archive::read(path)?;
    let name = match key {
        Some(k) => k.to_string(),
        None => a
            .tensors
            .iter()
            .find(|(_, t)| t.shape().len() == 2)
            .map(|(n, _)| n.clone())
            .ok_or_else(|| KwsError::Data(format!("{}: no 2-d tensor", path.display())))?,
    };
    a.take(&name)
        .ok_or_else(|| KwsError::Data(format!("{}: no tensor `{name}`", path.display())))
}

fn wav_features(path: &Path, input_dim: usize) -> Result<Tensor> {
    if input_dim % MEL_BINS != 0 {
        return Err(KwsError::Config(format!(
            "model input_dim {input_dim} is not a multiple of {MEL_BINS} mel bins"
        )));
    }
    stack_context(&extract_logmel(path)?, input_dim / MEL_BINS - 1)
}

pub fn cmd_stream_infer(
    cfg: &RunConfig,
    checkpoint: &Path,
    input: StreamInput,
    enroll_speaker: Option<&str>,
    out: &mut dyn Write,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let variant = checkpoint_variant(&ck)?;
    let model: &KwsModel = &ck.model;
    let needs_corpus = matches!(input, StreamInput::Utterance(_)) || enroll_speaker.is_some();
    let corpus = needs_corpus.then(|| Corpus::load(&cfg.corpus_dir)).transpose()?;
    let simulator = corpus.as_ref().map(|c| c.config.simulator());

    let (frames, stream_id, speaker) = match &input {
        StreamInput::Utterance(id) => {
            let c = corpus.as_ref().expect("loaded above");
            let u = c
                .utterances
                .iter()
                .find(|u| &u.record.utterance_id == id)
                .ok_or_else(|| KwsError::Data(format!("utterance {id} not in the corpus")))?;
            (u.features.frames.clone(), id.clone(), Some(u.record.speaker_id.clone()))
        }
        StreamInput::Features(p, key) => (load_features(p, key.as_deref())?, p.display().to_string(), None),
        StreamInput::Wav(p) => (wav_features(p, model.config().input_dim)?, p.display().to_string(), None),
    };
    let speaker = enroll_speaker.map(str::to_string).or(speaker);

    let embedding = match model.embedding_dim() {
        None => None,
        Some(dim) => {
            let paired = match (&speaker, corpus.as_ref(), cfg.eval.condition) {
                (Some(spk), Some(c), Condition::With) => {
                    let profile = c
                        .speaker(spk)
                        .ok_or_else(|| KwsError::Data(format!("speaker {spk} not in the corpus")))?;
                    let source = c
                        .utterances
                        .iter()
                        .find(|u| u.record.utterance_id == stream_id)
                        .map_or(stream_id.as_str(), |u| u.record.source_id());
                    let mut rng = seed::rng(seed::derive(cfg.eval_seed(), &format!("eval/pair/{stream_id}")));
                    let sim = simulator.as_ref().expect("corpus loaded");
                    Some(pair_enrollment(source, profile, &c.enrollments, sim, variant.pairing(), dim, &mut rng)?.values)
                }
                (_, _, Condition::Without) => None,
                _ => {
                    eprintln!("warning: no enrollment given; conditioning on the constant vector");
                    None
                }
            };
            Some(match paired {
                Some(v) => v,
                None => constant_vector(dim)?.values,
            })
        }
    };

    let mut session = model.new_session(embedding.as_deref())?;
    let (n, _) = frames.matrix_dims("stream_infer")?;
    let mut posteriors = Vec::with_capacity(n * model.config().num_classes);
    writeln!(out, "frame,keyword_posterior").map_err(out_err)?;
    for f in 0..n {
        let p = model.stream_step(&mut session, frames.row(f))?;
        writeln!(out, "{f},{}", p[crate::data::KEYWORD]).map_err(out_err)?;
        posteriors.extend(p);
    }
    let post = Tensor::new(vec![n, model.config().num_classes], posteriors)?;
    let score = utterance_score(&post, cfg.eval.smooth_window)?;
    writeln!(out, "score,{score}").map_err(out_err)?;
    Ok(())
}

fn run_label(dir: &Path) -> String {
    dir.file_name()
        .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned())
}

pub fn cmd_report(runs: &[PathBuf], baseline: Option<&Path>, dir: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let mut reports: Vec<(String, EvalReport)> = Vec::new();
    for r in runs {
        let path = r.join(REPORT_JSON);
        let text = std::fs::read_to_string(&path).map_err(|e| KwsError::io(&path, e))?;
        let report: EvalReport =
            serde_json::from_str(&text).map_err(|e| KwsError::Data(format!("{}: {e}", path.display())))?;
        reports.push((run_label(r), report));
    }
    let fingerprints: Vec<(&str, &str)> = reports
        .iter()
        .filter_map(|(l, r)| r.corpus_fingerprint.as_deref().map(|f| (l.as_str(), f)))
        .collect();
    if let Some((first_label, first)) = fingerprints.first() {
        if let Some((label, _)) = fingerprints.iter().find(|(_, f)| f != first) {
            return Err(KwsError::Data(format!(
                "runs `{first_label}` and `{label}` were evaluated on different corpora; refusing to compare"
            )));
        }
    }
    let base_idx = match baseline {
        Some(b) => {
            let label = run_label(b);
            Some(
                reports
                    .iter()
                    .position(|(l, _)| *l == label)
                    .ok_or_else(|| KwsError::Usage(format!("baseline `{label}` is not among the runs")))?,
            )
        }
        None => reports
            .iter()
            .position(|(_, r)| r.variant == Variant::Baseline && r.condition == Condition::With),
    };
    let table = render_comparison(&reports, base_idx);
    write!(out, "{table}").map_err(out_err)?;
    if let Some(d) = dir {
        std::fs::create_dir_all(d).map_err(|e| KwsError::io(d, e))?;
        write_file(&d.join("comparison.txt"), &table)?;
        let mut merged = Vec::new();
        for (label, r) in &reports {
            let mut r = r.clone();
            if let Some(b) = base_idx {
                r.compare_to(&reports[b].0, &reports[b].1);
            }
            merged.push(serde_json::json!({ "run": label, "report": r }));
        }
        write_file(&d.join("comparison.json"), &(serde_json::to_string_pretty(&merged)? + "\n"))?;
    }
    Ok(())
}

pub fn cmd_selftest(seed: u64, out: &mut dyn Write) -> Result<()> {
    let checks = crate::selftest::run(seed)?;
    let mut failed = 0;
    for c in &checks {
        let tag = if c.passed { "PASS" } else { "FAIL" };
        writeln!(out, "{tag} {} ({})", c.name, c.detail).map_err(out_err)?;
        failed += usize::from(!c.passed);
    }
    if failed > 0 {
        return Err(KwsError::Validation(format!("{failed} self check(s) failed")));
    }
    writeln!(out, "all {} checks passed", checks.len()).map_err(out_err)?;
    Ok(())
}
