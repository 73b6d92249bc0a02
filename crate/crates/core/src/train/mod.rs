//! Frame-level cross-entropy training with Adam, robust embedding mixing,
//! periodic dev EER and exact resume.

mod adam;

pub use adam::Adam;

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{Corpus, Split, Utterance};
use crate::error::{KwsError, Result};
use crate::eval::{self, Condition, EnrollmentContext, ScoringOptions};
use crate::model::{BoundModel, Checkpoint, Conditioning, KwsModel, KwsModelConfig};
use crate::numerics::{Tape, Tensor, Var};
use crate::seed;
use crate::speaker::{constant_vector, pair_enrollment, EmbeddingKind, EmbeddingSimulator, Pairing, SpeakerEmbedding};

/// Which embedding, if any, conditions the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    TiSelf,
    TiCross,
    TdCross,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::TiSelf, Variant::TiCross, Variant::TdCross];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::TiSelf => "ti_self",
            Variant::TiCross => "ti_cross",
            Variant::TdCross => "td_cross",
        }
    }

    pub fn pairing(self) -> Pairing {
        match self {
            Variant::Baseline => Pairing::None,
            Variant::TiSelf => Pairing::TiSelf,
            Variant::TiCross => Pairing::TiCross,
            Variant::TdCross => Pairing::TdCross,
        }
    }

    pub fn conditioning(self) -> Conditioning {
        match self.pairing().embedding_dim() {
            None => Conditioning::None,
            Some(embedding_dim) => Conditioning::Film { embedding_dim },
        }
    }
}

impl FromStr for Variant {
    type Err = KwsError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| KwsError::Config(format!("unknown variant `{s}` (baseline|ti_self|ti_cross|td_cross)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub steps: u64,
    /// Utterances per step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Probability of replacing each embedding with the constant vector.
    pub robust_prob: f64,
    /// Dev EER every this many steps (and after the last); 0 only at the end.
    pub eval_every: u64,
    pub smooth_window: usize,
    pub seed: u64,
    /// Layer shapes; conditioning is taken from `variant`.
    pub model: KwsModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Baseline,
            steps: 1500,
            batch_size: 16,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            robust_prob: 0.0,
            eval_every: 500,
            smooth_window: eval::DEFAULT_SMOOTH_WINDOW,
            seed: 1,
            model: KwsModelConfig::desk(40, Conditioning::None),
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> KwsModelConfig {
        self.model.with_conditioning(self.variant.conditioning())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(KwsError::Config(m));
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return bad("adam hyperparameters out of range".into());
        }
        if !(0.0..=1.0).contains(&self.robust_prob) {
            return bad(format!("robust_prob must lie in [0, 1], got {}", self.robust_prob));
        }
        if self.smooth_window == 0 {
            return bad("smooth_window must be at least 1".into());
        }
        self.model_config().validate()
    }
}

/// One utterance with the embedding it is trained with.
#[derive(Debug, Clone)]
pub struct BatchItem<'a> {
    pub utterance: &'a Utterance,
    pub embedding: Option<SpeakerEmbedding>,
    /// Set when robust mixing swapped in the constant vector.
    pub replaced: bool,
}

impl<'a> BatchItem<'a> {
    pub fn new(utterance: &'a Utterance, embedding: Option<SpeakerEmbedding>) -> Self {
        Self {
            utterance,
            embedding,
            replaced: false,
        }
    }
}

/// Replaces each present embedding by the constant vector of the same width
/// with probability `p`; returns how many were replaced.
pub fn robust_mix(batch: &mut [BatchItem<'_>], p: f64, rng: &mut ChaCha8Rng) -> Result<usize> {
    if !(0.0..=1.0).contains(&p) {
        return Err(KwsError::Validation(format!("robust_prob must lie in [0, 1], got {p}")));
    }
    let mut replaced = 0;
    for item in batch {
        let Some(e) = &item.embedding else { continue };
        if rng.random_bool(p) {
            item.embedding = Some(constant_vector(e.dim())?);
            item.replaced = true;
            replaced += 1;
        }
    }
    Ok(replaced)
}

/// Records the batch loss: per-utterance mean frame CE, averaged over the batch.
pub fn record_loss(tape: &mut Tape, bound: &BoundModel, batch: &[BatchItem<'_>]) -> Result<Var> {
    if batch.is_empty() {
        return Err(KwsError::Validation("empty batch".into()));
    }
    let mut total: Option<Var> = None;
    for item in batch {
        let logits = bound.forward(
            tape,
            &item.utterance.features.frames,
            item.embedding.as_ref().map(|e| e.values.as_slice()),
        )?;
        let ce = tape.softmax_cross_entropy(logits, &item.utterance.labels.labels)?;
        total = Some(match total {
            None => ce,
            Some(t) => tape.add(t, ce)?,
        });
    }
    Ok(tape.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64))
}

/// Batch loss without gradients.
pub fn loss(model: &KwsModel, batch: &[BatchItem<'_>]) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let l = record_loss(&mut tape, &bound, batch)?;
    Ok(tape.value(l).data()[0])
}

/// Batch loss and its gradient for every parameter, in parameter order.
pub fn loss_and_grads(model: &KwsModel, batch: &[BatchItem<'_>]) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let l = record_loss(&mut tape, &bound, batch)?;
    let value = tape.value(l).data()[0];
    if !value.is_finite() {
        let (node, op) = tape.first_non_finite().unwrap_or((l.index(), "loss"));
        return Err(KwsError::NonFinite { op, node });
    }
    let mut grads = tape.backward(l)?;
    let shapes: Vec<Vec<usize>> = model.named_params().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let out = bound
        .vars
        .iter()
        .zip(&shapes)
        .map(|(&v, s)| grads.take_or_zeros(v, s))
        .collect();
    Ok((value, out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub train_loss: f64,
    pub dev_eer: Option<f64>,
    pub wall_ms: u128,
}

pub const METRICS_CSV_HEADER: &str = "step,train_loss,dev_eer,wall_ms";

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let dev = r.dev_eer.map(|e| e.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", r.step, r.train_loss, dev, r.wall_ms));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Final state, resumable.
    pub checkpoint: Checkpoint,
    /// Model with the lowest dev EER seen in this invocation.
    pub best: Option<(u64, f64, KwsModel)>,
    pub metrics: Vec<MetricRow>,
}

/// Sub-seeds of a run, all derived from the master seed.
pub fn run_seeds(master: u64) -> BTreeMap<String, u64> {
    ["model", "batches", "pairing", "robust", "dev"]
        .into_iter()
        .map(|p| (p.to_string(), seed::derive(master, &format!("train/{p}"))))
        .collect()
}

/// Speakers in `split` that have no enrollment of `kind`.
fn unenrolled_speakers(corpus: &Corpus, splits: &[Split], kind: EmbeddingKind) -> Vec<String> {
    let speakers: BTreeSet<&str> = corpus
        .utterances
        .iter()
        .filter(|u| splits.contains(&u.record.split))
        .map(|u| u.record.speaker_id.as_str())
        .collect();
    speakers
        .into_iter()
        .filter(|s| corpus.enrollments.lookup(s, kind).is_empty())
        .map(str::to_string)
        .collect()
}

struct Sampler {
    seed: u64,
    n: usize,
    epoch: Option<(u64, Vec<usize>)>,
}

impl Sampler {
    /// Index of the `i`-th sample: epochs are independent seeded permutations.
    fn get(&mut self, i: u64) -> usize {
        let epoch = i / self.n as u64;
        if self.epoch.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut order: Vec<usize> = (0..self.n).collect();
            order.shuffle(&mut seed::rng(seed::derive_indexed(self.seed, "epoch", epoch)));
            self.epoch = Some((epoch, order));
        }
        self.epoch.as_ref().expect("set above").1[(i % self.n as u64) as usize]
    }
}

/// Trains per `cfg` on the corpus train split, starting fresh or from
/// `resume`, and stops early after `stop_at` total steps if given. The
/// result depends only on `(cfg, corpus, resume, stop_at)`, and stopping
/// then resuming reproduces an uninterrupted run exactly.
pub fn train(corpus: &Corpus, cfg: &TrainConfig, resume: Option<Checkpoint>, stop_at: Option<u64>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model_config = cfg.model_config();
    let pairing = cfg.variant.pairing();
    if matches!(pairing, Pairing::TiCross | Pairing::TdCross) {
        let missing = unenrolled_speakers(corpus, &[Split::Train, Split::Dev], pairing.kind());
        if !missing.is_empty() {
            return Err(KwsError::MissingEnrollments(missing));
        }
    }
    let train_set: Vec<&Utterance> = corpus.split(Split::Train).collect();
    if train_set.is_empty() {
        return Err(KwsError::Data("train split is empty".into()));
    }
    if let Some(u) = train_set.iter().find(|u| u.features.dim() != model_config.input_dim) {
        return Err(KwsError::Data(format!(
            "utterance {} has {}-dim features, model expects {}",
            u.record.utterance_id,
            u.features.dim(),
            model_config.input_dim
        )));
    }
    let dev_set: Vec<&Utterance> = corpus.originals(Split::Dev).collect();
    let seeds = run_seeds(cfg.seed);

    let (mut model, start_step, mut loss_history, mut dev_history, mut best_dev, moments) = match resume {
        None => (KwsModel::build(&model_config, seeds["model"])?, 0, Vec::new(), Vec::new(), None, None),
        Some(ck) => {
            if ck.model.config() != &model_config {
                return Err(KwsError::ConfigMismatch(format!(
                    "checkpoint was trained with a different model config than {}",
                    cfg.variant.as_str()
                )));
            }
            if ck.seeds != seeds {
                return Err(KwsError::ConfigMismatch("checkpoint seeds differ from this run's seeds".into()));
            }
            let dev: Vec<(u64, f64)> = serde_json::from_value(ck.meta["dev_eer_history"].clone()).unwrap_or_default();
            let best = ck.meta["best_dev_eer"].as_f64();
            (ck.model, ck.step, ck.loss_history, dev, best, ck.optimizer)
        }
    };
    if start_step > cfg.steps {
        return Err(KwsError::Config(format!(
            "checkpoint is at step {start_step}, past the configured {} steps",
            cfg.steps
        )));
    }

    let shapes: Vec<Vec<usize>> = model.named_params().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let mut adam = Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon, &shape_refs);
    if let Some(m) = moments {
        adam.restore(m, start_step)?;
    } else if start_step > 0 {
        return Err(KwsError::Validation("resumed checkpoint has no optimizer state".into()));
    }

    let simulator: EmbeddingSimulator = corpus.config.simulator();
    let ctx = EnrollmentContext {
        profiles: corpus.speaker_map(),
        store: &corpus.enrollments,
        simulator: &simulator,
    };
    let scoring = ScoringOptions {
        smooth_window: cfg.smooth_window,
        seed: seeds["dev"],
        ..ScoringOptions::default()
    };
    let mut sampler = Sampler {
        seed: seeds["batches"],
        n: train_set.len(),
        epoch: None,
    };
    let started = Instant::now();
    let mut metrics = Vec::new();
    let mut best = None;

    let end = stop_at.map_or(cfg.steps, |s| s.min(cfg.steps)).max(start_step);
    for step in start_step..end {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        let mut pair_rng = seed::rng(seed::derive_indexed(seeds["pairing"], "step", step));
        for j in 0..cfg.batch_size {
            let utt = train_set[sampler.get(step * cfg.batch_size as u64 + j as u64)];
            let embedding = match model.embedding_dim() {
                None => None,
                Some(dim) => {
                    let profile = ctx.profile(&utt.record.speaker_id)?;
                    let source = utt.record.source_id();
                    Some(pair_enrollment(source, profile, ctx.store, ctx.simulator, pairing, dim, &mut pair_rng)?)
                }
            };
            batch.push(BatchItem::new(utt, embedding));
        }
        let mut robust_rng = seed::rng(seed::derive_indexed(seeds["robust"], "step", step));
        robust_mix(&mut batch, cfg.robust_prob, &mut robust_rng)?;

        let (value, grads) = loss_and_grads(&model, &batch)?;
        adam.step(model.params_mut(), &grads)?;
        loss_history.push(value);

        let done = step + 1;
        let due = done == cfg.steps || (cfg.eval_every > 0 && done % cfg.eval_every == 0);
        let dev_eer = if due && !dev_set.is_empty() {
            let scored = eval::score_utterances(&model, dev_set.iter().copied(), cfg.variant, Condition::With, &ctx, &scoring)?;
            let (pos, neg) = eval::split_scores(&scored.scores);
            if pos.is_empty() || neg.is_empty() {
                None
            } else {
                Some(eval::compute_eer(&pos, &neg)?.eer)
            }
        } else {
            None
        };
        if let Some(e) = dev_eer {
            dev_history.push((done, e));
            if best_dev.is_none_or(|b| e < b) {
                best_dev = Some(e);
                best = Some((done, e, model.clone()));
            }
            log::info!("step {done}: loss {value:.5}, dev EER {:.3}%", 100.0 * e);
        } else {
            log::debug!("step {done}: loss {value:.5}");
        }
        metrics.push(MetricRow {
            step: done,
            train_loss: value,
            dev_eer,
            wall_ms: started.elapsed().as_millis(),
        });
    }

    let checkpoint = Checkpoint {
        step: end,
        seeds,
        optimizer: Some(adam.moments()),
        loss_history,
        meta: json!({
            "variant": cfg.variant.as_str(),
            "robust_prob": cfg.robust_prob,
            "smooth_window": cfg.smooth_window,
            "best_dev_eer": best_dev,
            "dev_eer_history": dev_history,
        }),
        model,
    };
    Ok(TrainOutcome {
        checkpoint,
        best,
        metrics,
    })
}

/// Reads the variant a checkpoint was trained as from its metadata, falling
/// back on the model's conditioning.
pub fn checkpoint_variant(ck: &Checkpoint) -> Result<Variant> {
    match ck.meta["variant"].as_str() {
        Some(v) => v.parse(),
        None if ck.model.is_conditioned() => Err(KwsError::Config(
            "conditioned checkpoint does not record its variant".into(),
        )),
        None => Ok(Variant::Baseline),
    }
}
