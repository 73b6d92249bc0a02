//! Utterance scoring, EER/DET metrics and group-stratified reports.

mod eer;
mod report;

pub use eer::{compute_eer, det_csv, det_curve, probit, DetPoint, EerResult};
pub use report::{relative_improvement, render_comparison, stratified_report, CellResult, EvalReport, MIN_CELL_COUNT};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{Corpus, Polarity, Split, Utterance, KEYWORD};
use crate::error::{KwsError, Result};
use crate::model::KwsModel;
use crate::numerics::Tensor;
use crate::seed;
use crate::speaker::{
    constant_vector, pair_enrollment, AgeGroup, EmbeddingSimulator, EnrollmentStore, Locale, Pairing, SpeakerProfile,
};
use crate::train::Variant;

pub const DEFAULT_SMOOTH_WINDOW: usize = 10;

/// Whether the conditioned model sees the speaker embedding or the constant
/// vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    With,
    Without,
}

impl Condition {
    pub fn as_str(self) -> &'static str {
        match self {
            Condition::With => "with",
            Condition::Without => "without",
        }
    }
}

/// What to do when a cross-enrollment lookup finds nothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingEnrollment {
    #[default]
    Fail,
    Skip,
    ConstantVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredUtterance {
    pub utterance_id: String,
    pub speaker_id: String,
    pub locale: Locale,
    pub age_group: AgeGroup,
    pub polarity: Polarity,
    pub score: f64,
    pub variant: Variant,
    pub condition: Condition,
}

/// Max over frames of the trailing `window`-frame mean of the keyword
/// posterior. Early frames average over the frames seen so far.
pub fn utterance_score(posteriors: &Tensor, window: usize) -> Result<f64> {
    let (frames, classes) = posteriors.matrix_dims("utterance_score")?;
    if frames == 0 || window == 0 || classes <= KEYWORD {
        return Err(KwsError::Validation(format!(
            "utterance_score needs frames ≥ 1, window ≥ 1 and a keyword column (frames {frames}, window {window}, classes {classes})"
        )));
    }
    let mut best = f64::NEG_INFINITY;
    let mut sum = 0.0;
    for f in 0..frames {
        sum += posteriors.get2(f, KEYWORD);
        if f >= window {
            sum -= posteriors.get2(f - window, KEYWORD);
        }
        best = best.max(sum / window.min(f + 1) as f64);
    }
    Ok(best.clamp(0.0, 1.0))
}

/// Everything needed to pair query utterances with embeddings.
pub struct EnrollmentContext<'a> {
    pub profiles: BTreeMap<&'a str, &'a SpeakerProfile>,
    pub store: &'a EnrollmentStore,
    pub simulator: &'a EmbeddingSimulator,
}

impl<'a> EnrollmentContext<'a> {
    pub fn profile(&self, speaker_id: &str) -> Result<&'a SpeakerProfile> {
        self.profiles
            .get(speaker_id)
            .copied()
            .ok_or_else(|| KwsError::Data(format!("speaker {speaker_id} missing from the speaker list")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoringOptions {
    pub smooth_window: usize,
    pub seed: u64,
    pub missing_enrollment: MissingEnrollment,
}

impl Default for ScoringOptions {
    fn default() -> Self {
        Self {
            smooth_window: DEFAULT_SMOOTH_WINDOW,
            seed: 0,
            missing_enrollment: MissingEnrollment::Fail,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoringOutcome {
    pub scores: Vec<ScoredUtterance>,
    /// Utterances skipped for lack of enrollments.
    pub skipped: Vec<String>,
}

/// The embedding a model sees for `utt`, or `None` for unconditioned models.
/// `Ok(None)` from a conditioned model means the utterance was skipped.
fn eval_embedding(
    model: &KwsModel,
    utt: &Utterance,
    pairing: Pairing,
    condition: Condition,
    ctx: &EnrollmentContext<'_>,
    opts: &ScoringOptions,
) -> Result<Option<Option<Vec<f64>>>> {
    let Some(dim) = model.embedding_dim() else {
        return Ok(Some(None));
    };
    if condition == Condition::Without || pairing == Pairing::None {
        return Ok(Some(Some(constant_vector(dim)?.values)));
    }
    let profile = ctx.profile(&utt.record.speaker_id)?;
    let mut rng = seed::rng(seed::derive(opts.seed, &format!("eval/pair/{}", utt.record.utterance_id)));
    match pair_enrollment(utt.record.source_id(), profile, ctx.store, ctx.simulator, pairing, dim, &mut rng) {
        Ok(e) if e.dim() != dim => Err(KwsError::dim("eval_embedding", &[e.dim()], &[dim])),
        Ok(e) => Ok(Some(Some(e.values))),
        Err(KwsError::NoEnrollment(s)) => match opts.missing_enrollment {
            MissingEnrollment::Fail => Err(KwsError::NoEnrollment(s)),
            MissingEnrollment::Skip => Ok(None),
            MissingEnrollment::ConstantVector => Ok(Some(Some(constant_vector(dim)?.values))),
        },
        Err(e) => Err(e),
    }
}

/// Scores every utterance with the batch forward path.
pub fn score_utterances<'u>(
    model: &KwsModel,
    utterances: impl IntoIterator<Item = &'u Utterance>,
    variant: Variant,
    condition: Condition,
    ctx: &EnrollmentContext<'_>,
    opts: &ScoringOptions,
) -> Result<ScoringOutcome> {
    let pairing = variant.pairing();
    let mut out = ScoringOutcome::default();
    for utt in utterances {
        let Some(embedding) = eval_embedding(model, utt, pairing, condition, ctx, opts)? else {
            out.skipped.push(utt.record.utterance_id.clone());
            continue;
        };
        let post = model.posteriors(&utt.features.frames, embedding.as_deref())?;
        let score = utterance_score(&post, opts.smooth_window)?;
        if !score.is_finite() {
            return Err(KwsError::NonFinite {
                op: "utterance_score",
                node: 0,
            });
        }
        out.scores.push(ScoredUtterance {
            utterance_id: utt.record.utterance_id.clone(),
            speaker_id: utt.record.speaker_id.clone(),
            locale: utt.record.locale,
            age_group: utt.record.age_group,
            polarity: utt.record.polarity,
            score,
            variant,
            condition,
        });
    }
    Ok(out)
}

/// Positive and negative score lists.
pub fn split_scores<'a>(scores: impl IntoIterator<Item = &'a ScoredUtterance>) -> (Vec<f64>, Vec<f64>) {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for s in scores {
        match s.polarity {
            Polarity::Positive => pos.push(s.score),
            Polarity::Negative => neg.push(s.score),
        }
    }
    (pos, neg)
}

pub const SCORES_CSV_HEADER: &str = "utterance_id,speaker_id,locale,age_group,polarity,condition,score";

pub fn scores_csv(scores: &[ScoredUtterance]) -> String {
    let mut out = String::from(SCORES_CSV_HEADER);
    out.push('\n');
    for s in scores {
        let polarity = match s.polarity {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            s.utterance_id,
            s.speaker_id,
            s.locale.as_str(),
            s.age_group.as_str(),
            polarity,
            s.condition.as_str(),
            s.score
        );
    }
    out
}

/// Scores `split` originals of `corpus` and builds the stratified report,
/// pooling the corpus' designated under-represented cells.
pub fn evaluate_split(
    model: &KwsModel,
    corpus: &Corpus,
    split: Split,
    variant: Variant,
    condition: Condition,
    opts: &ScoringOptions,
) -> Result<(ScoringOutcome, EvalReport)> {
    let simulator = corpus.config.simulator();
    let ctx = EnrollmentContext {
        profiles: corpus.speaker_map(),
        store: &corpus.enrollments,
        simulator: &simulator,
    };
    let outcome = score_utterances(model, corpus.originals(split), variant, condition, &ctx, opts)?;
    if outcome.scores.is_empty() {
        return Err(KwsError::Data(format!("no scorable utterances in the {split:?} split")));
    }
    let mut report = stratified_report(&outcome.scores, None, &corpus.config.underrepresented_cells())?;
    report.skipped = outcome.skipped.len();
    Ok((outcome, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keyword_column(p: &[f64]) -> Tensor {
        Tensor::from_rows(&p.iter().map(|&k| vec![1.0 - k, k]).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn score_examples() {
        assert_eq!(utterance_score(&keyword_column(&[0.0; 5]), 3).unwrap(), 0.0);
        assert_eq!(utterance_score(&keyword_column(&[0.7]), 1).unwrap(), 0.7);
        assert_eq!(utterance_score(&keyword_column(&[0.0, 1.0, 1.0, 0.0]), 2).unwrap(), 1.0);
    }

    #[test]
    fn bad_window_rejected() {
        assert!(utterance_score(&keyword_column(&[0.5]), 0).is_err());
    }

    #[test]
    fn csv_has_one_row_per_score() {
        let s = ScoredUtterance {
            utterance_id: "u".into(),
            speaker_id: "s".into(),
            locale: Locale::C,
            age_group: AgeGroup::Child,
            polarity: Polarity::Negative,
            score: 0.25,
            variant: Variant::Baseline,
            condition: Condition::Without,
        };
        let csv = scores_csv(&[s.clone(), s]);
        assert_eq!(csv.lines().count(), 3);
        assert_eq!(csv.lines().nth(1).unwrap(), "u,s,C,child,negative,without,0.25");
    }
}
