//! Synthetic corpus generation, speaker-disjoint splits, noise augmentation
//! and the log-mel front end for real audio.

mod augment;
mod corpus;
mod frontend;
mod store;
mod split;

pub use augment::{augment_noise, measured_snr_db};
pub use corpus::{generate_corpus, CellSpec, Corpus, CorpusConfig, Lexicon};
pub use frontend::{
    extract_logmel, extract_logmel_samples, hz_to_mel, mel_center_frequencies, mel_to_hz, read_wav, stack_context,
    FRAME_LENGTH, HOP_LENGTH, MEL_BINS, SAMPLE_RATE,
};
pub use split::{split_by_speaker, SplitFractions};
pub use store::{corpus_fingerprint, CORPUS_CONFIG_FILE, ENROLLMENTS_FILE, MANIFEST_FILE, SPEAKERS_FILE};

use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::speaker::{AgeGroup, Locale};

pub const NON_KEYWORD: usize = 0;
pub const KEYWORD: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Eval,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Eval];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
}

/// Acoustic feature frames `[frames × dim]` of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub frames: Tensor,
    pub utterance_id: String,
    pub speaker_id: String,
}

impl FeatureSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.frames.last_dim()
    }
}

/// Per-frame class indices plus the keyword span `[start, end)` of positives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSequence {
    pub labels: Vec<usize>,
    pub keyword_span: Option<(usize, usize)>,
}

impl LabelSequence {
    pub fn negative(frames: usize) -> Self {
        Self {
            labels: vec![NON_KEYWORD; frames],
            keyword_span: None,
        }
    }

    pub fn positive(frames: usize, start: usize, end: usize) -> Self {
        let mut labels = vec![NON_KEYWORD; frames];
        labels[start..end].iter_mut().for_each(|l| *l = KEYWORD);
        Self {
            labels,
            keyword_span: Some((start, end)),
        }
    }

    /// One contiguous keyword run of at least 5 frames for positives, none
    /// for negatives, and agreement with `keyword_span`.
    pub fn is_valid(&self) -> bool {
        let runs: Vec<(usize, usize)> = {
            let mut runs = Vec::new();
            let mut start = None;
            for (i, &l) in self.labels.iter().chain(std::iter::once(&NON_KEYWORD)).enumerate() {
                match (l == KEYWORD, start) {
                    (true, None) => start = Some(i),
                    (false, Some(s)) => {
                        runs.push((s, i));
                        start = None;
                    }
                    _ => {}
                }
            }
            runs
        };
        match self.keyword_span {
            None => runs.is_empty(),
            Some(span) => runs == [span] && span.1 - span.0 >= 5,
        }
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub utterance_id: String,
    pub speaker_id: String,
    pub locale: Locale,
    pub age_group: AgeGroup,
    pub split: Split,
    pub polarity: Polarity,
    pub num_frames: usize,
    pub keyword_span: Option<(usize, usize)>,
    /// SNR of the additive noise for augmented copies.
    pub snr_db: Option<f64>,
    /// Original utterance of an augmented copy.
    pub augment_of: Option<String>,
    pub feature_file: String,
    pub feature_key: String,
    pub label_key: String,
    /// Same-speaker positive originals usable as cross enrollments.
    pub enrollment_refs: Vec<String>,
}

impl UtteranceRecord {
    /// The id used for embedding noise and self-exclusion in enrollment pairing.
    pub fn source_id(&self) -> &str {
        self.augment_of.as_deref().unwrap_or(&self.utterance_id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub record: UtteranceRecord,
    pub features: FeatureSequence,
    pub labels: LabelSequence,
}
