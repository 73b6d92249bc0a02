use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::augment::augment_noise;
use super::split::{split_by_speaker, SplitFractions};
use super::{FeatureSequence, LabelSequence, Polarity, Split, Utterance, UtteranceRecord};
use crate::error::{KwsError, Result};
use crate::numerics::Tensor;
use crate::seed;
use crate::speaker::{
    normalize, AgeGroup, EmbeddingKind, EmbeddingSimulator, EnrollmentStore, Locale, SpeakerProfile, VOICE_DIM,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    pub locale: Locale,
    pub age_group: AgeGroup,
    pub speakers: usize,
    #[serde(default)]
    pub underrepresented: bool,
}

/// Everything that determines a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub feature_dim: usize,
    pub cells: Vec<CellSpec>,
    pub positives_per_speaker: usize,
    pub negatives_per_speaker: usize,
    /// Inclusive utterance length range in frames.
    pub min_frames: usize,
    pub max_frames: usize,
    /// Inclusive per-phoneme duration range in frames.
    pub min_phoneme_frames: usize,
    pub max_phoneme_frames: usize,
    pub num_phonemes: usize,
    pub phoneme_amplitude: f64,
    /// Scale of the voice-dependent part of each phoneme rendering.
    pub voice_strength: f64,
    /// Length of the fixed voice-space step that turns the keyword into its
    /// confusable twin.
    pub confusable_offset: f64,
    /// Probability that a negative contains the confusable twin.
    pub confusable_prob: f64,
    pub noise_std: f64,
    /// Norm of the per-cell feature bias.
    pub group_shift: f64,
    /// Norm of the per-cell offset of voice centers.
    pub voice_group_spread: f64,
    /// Spread of individual voices around their cell center.
    pub voice_individual_spread: f64,
    /// Multiplier on both shifts for under-represented cells.
    pub underrepresented_shift_multiplier: f64,
    pub augment_copies: usize,
    pub min_snr_db: f64,
    pub max_snr_db: f64,
    pub split: SplitFractions,
    pub sigma_td: f64,
    pub sigma_ti: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        let mut cells = Vec::new();
        for locale in Locale::ALL {
            for age_group in AgeGroup::ALL {
                let underrepresented = age_group == AgeGroup::Child && matches!(locale, Locale::B | Locale::D);
                cells.push(CellSpec {
                    locale,
                    age_group,
                    speakers: if underrepresented { 10 } else { 30 },
                    underrepresented,
                });
            }
        }
        Self {
            seed: 7,
            feature_dim: 40,
            cells,
            positives_per_speaker: 10,
            negatives_per_speaker: 10,
            min_frames: 80,
            max_frames: 110,
            min_phoneme_frames: 8,
            max_phoneme_frames: 11,
            num_phonemes: 12,
            phoneme_amplitude: 3.0,
            voice_strength: 4.0,
            confusable_offset: 0.35,
            confusable_prob: 0.5,
            noise_std: 1.0,
            group_shift: 1.0,
            voice_group_spread: 0.6,
            voice_individual_spread: 1.2,
            underrepresented_shift_multiplier: 2.0,
            augment_copies: 2,
            min_snr_db: 5.0,
            max_snr_db: 20.0,
            split: SplitFractions::default(),
            sigma_td: crate::speaker::DEFAULT_SIGMA_TD,
            sigma_ti: crate::speaker::DEFAULT_SIGMA_TI,
        }
    }
}

const KEYWORD_PHONEMES: [usize; 4] = [0, 1, 2, 3];

impl CorpusConfig {
    pub fn total_speakers(&self) -> usize {
        self.cells.iter().map(|c| c.speakers).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(KwsError::Config(m));
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive".into());
        }
        if self.cells.is_empty() {
            return bad("corpus needs at least one (locale, age_group) cell".into());
        }
        let mut seen = BTreeSet::new();
        for c in &self.cells {
            if !seen.insert((c.locale, c.age_group)) {
                return bad(format!("duplicate cell ({}, {})", c.locale.as_str(), c.age_group.as_str()));
            }
            if c.speakers < 3 {
                return bad(format!(
                    "cell ({}, {}) has {} speaker(s); every cell needs at least 3",
                    c.locale.as_str(),
                    c.age_group.as_str(),
                    c.speakers
                ));
            }
        }
        let under: usize = self.cells.iter().filter(|c| c.underrepresented).map(|c| c.speakers).sum();
        if under as f64 > 0.2 * self.total_speakers() as f64 {
            return bad(format!(
                "under-represented cells hold {under} of {} speakers (limit 20%)",
                self.total_speakers()
            ));
        }
        if self.positives_per_speaker + self.negatives_per_speaker == 0 {
            return bad("speakers need at least one utterance".into());
        }
        if self.num_phonemes < KEYWORD_PHONEMES.len() + 2 {
            return bad("need at least 6 phonemes".into());
        }
        if self.min_phoneme_frames < 2 || self.min_phoneme_frames > self.max_phoneme_frames {
            return bad("phoneme duration range is invalid".into());
        }
        let longest_word = KEYWORD_PHONEMES.len() * self.max_phoneme_frames;
        if self.min_frames < 10 || self.min_frames > self.max_frames || self.min_frames < longest_word + 4 {
            return bad(format!(
                "frame range [{}, {}] cannot hold a {longest_word}-frame keyword",
                self.min_frames, self.max_frames
            ));
        }
        if !(0.0..=40.0).contains(&self.min_snr_db) || !(0.0..=40.0).contains(&self.max_snr_db) || self.min_snr_db > self.max_snr_db {
            return bad("snr range must lie within [0, 40] dB".into());
        }
        if !(0.0..=1.0).contains(&self.confusable_prob) {
            return bad("confusable_prob must be a probability".into());
        }
        self.split.validate()?;
        Ok(())
    }

    pub fn underrepresented_cells(&self) -> Vec<(Locale, AgeGroup)> {
        self.cells
            .iter()
            .filter(|c| c.underrepresented)
            .map(|c| (c.locale, c.age_group))
            .collect()
    }

    pub fn simulator(&self) -> EmbeddingSimulator {
        EmbeddingSimulator::new(seed::derive(self.seed, "embeddings"), self.sigma_td, self.sigma_ti)
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}

fn unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v = gaussian(rng, n, 1.0);
    normalize(&mut v);
    v
}

fn scaled(v: &[f64], s: f64) -> Vec<f64> {
    v.iter().map(|x| x * s).collect()
}

/// Shared acoustic "language" of a corpus: phoneme templates, how voices
/// bend each phoneme, and per-cell offsets.
#[derive(Debug, Clone)]
pub struct Lexicon {
    templates: Vec<Vec<f64>>,
    /// Per phoneme, `[feature_dim × VOICE_DIM]`.
    voice_maps: Vec<Tensor>,
    confusable_direction: Vec<f64>,
    population_voice: Vec<f64>,
    cell_voice_centers: BTreeMap<(Locale, AgeGroup), Vec<f64>>,
    cell_feature_shifts: BTreeMap<(Locale, AgeGroup), Vec<f64>>,
}

impl Lexicon {
    pub fn new(cfg: &CorpusConfig) -> Self {
        let mut rng = seed::rng(seed::derive(cfg.seed, "corpus/lexicon"));
        let d = cfg.feature_dim;
        let templates = (0..cfg.num_phonemes)
            .map(|_| scaled(&unit(&mut rng, d), cfg.phoneme_amplitude))
            .collect();
        let voice_maps = (0..cfg.num_phonemes)
            .map(|_| {
                let data = gaussian(&mut rng, d * VOICE_DIM, cfg.voice_strength / (d as f64).sqrt());
                Tensor::new(vec![d, VOICE_DIM], data).expect("positive dims")
            })
            .collect();
        let confusable_direction = unit(&mut rng, VOICE_DIM);
        let population_voice = unit(&mut rng, VOICE_DIM);
        let mut cell_voice_centers = BTreeMap::new();
        let mut cell_feature_shifts = BTreeMap::new();
        for locale in Locale::ALL {
            for age in AgeGroup::ALL {
                let mult = cfg
                    .cells
                    .iter()
                    .find(|c| c.locale == locale && c.age_group == age && c.underrepresented)
                    .map_or(1.0, |_| cfg.underrepresented_shift_multiplier);
                cell_voice_centers.insert((locale, age), scaled(&unit(&mut rng, VOICE_DIM), cfg.voice_group_spread * mult));
                cell_feature_shifts.insert((locale, age), scaled(&unit(&mut rng, d), cfg.group_shift * mult));
            }
        }
        Self {
            templates,
            voice_maps,
            confusable_direction,
            population_voice,
            cell_voice_centers,
            cell_feature_shifts,
        }
    }

    pub fn feature_shift(&self, locale: Locale, age: AgeGroup) -> &[f64] {
        &self.cell_feature_shifts[&(locale, age)]
    }

    /// Unit voice drawn around the population mean and the cell center.
    fn draw_voice(&self, cfg: &CorpusConfig, locale: Locale, age: AgeGroup, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let center = &self.cell_voice_centers[&(locale, age)];
        let spread = cfg.voice_individual_spread / (VOICE_DIM as f64).sqrt();
        let mut v: Vec<f64> = self
            .population_voice
            .iter()
            .zip(center)
            .map(|(p, c)| {
                let z: f64 = StandardNormal.sample(rng);
                p + c + spread * z
            })
            .collect();
        normalize(&mut v);
        v
    }

    /// Phoneme `p` as spoken with `voice`.
    fn render(&self, p: usize, voice: &[f64]) -> Vec<f64> {
        let map = &self.voice_maps[p];
        self.templates[p]
            .iter()
            .enumerate()
            .map(|(i, t)| t + map.row(i).iter().zip(voice).map(|(m, v)| m * v).sum::<f64>())
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
enum Word {
    Keyword,
    Confusable,
    Other,
}

/// A generated corpus held in memory.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub speakers: Vec<SpeakerProfile>,
    pub utterances: Vec<Utterance>,
    pub enrollments: EnrollmentStore,
}

impl Corpus {
    pub fn speaker(&self, id: &str) -> Option<&SpeakerProfile> {
        self.speakers.iter().find(|s| s.speaker_id == id)
    }

    pub fn speaker_map(&self) -> BTreeMap<&str, &SpeakerProfile> {
        self.speakers.iter().map(|s| (s.speaker_id.as_str(), s)).collect()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(move |u| u.record.split == split)
    }

    /// Originals only (augmented copies excluded).
    pub fn originals(&self, split: Split) -> impl Iterator<Item = &Utterance> {
        self.split(split).filter(|u| u.record.augment_of.is_none())
    }
}

fn speaker_id(index: usize) -> String {
    format!("s{index:04}")
}

struct SpeakerDraft {
    profile: SpeakerProfile,
    utterances: Vec<(String, Polarity, Tensor, LabelSequence)>,
}

fn generate_speaker(cfg: &CorpusConfig, lex: &Lexicon, index: usize, cell: &CellSpec) -> Result<SpeakerDraft> {
    let mut rng = seed::rng(seed::derive_indexed(cfg.seed, "corpus/speaker", index as u64));
    let voice = lex.draw_voice(cfg, cell.locale, cell.age_group, &mut rng);
    let shift = lex.feature_shift(cell.locale, cell.age_group).to_vec();
    let profile = SpeakerProfile {
        speaker_id: speaker_id(index),
        locale: cell.locale,
        age_group: cell.age_group,
        voice: voice.clone(),
        group_shift: shift.clone(),
    };
    let base_duration = rng.random_range(cfg.min_phoneme_frames..=cfg.max_phoneme_frames);
    let others: Vec<usize> = (KEYWORD_PHONEMES.len()..cfg.num_phonemes).collect();
    let d = cfg.feature_dim;

    let mut utterances = Vec::new();
    let plan = (0..cfg.positives_per_speaker)
        .map(|i| (Polarity::Positive, i))
        .chain((0..cfg.negatives_per_speaker).map(|i| (Polarity::Negative, i)));
    for (polarity, i) in plan {
        let id = match polarity {
            Polarity::Positive => format!("{}-p{i:02}", profile.speaker_id),
            Polarity::Negative => format!("{}-n{i:02}", profile.speaker_id),
        };
        let frames = rng.random_range(cfg.min_frames..=cfg.max_frames);
        let mut x: Vec<f64> = gaussian(&mut rng, frames * d, cfg.noise_std);
        for f in 0..frames {
            for (v, s) in x[f * d..(f + 1) * d].iter_mut().zip(&shift) {
                *v += s;
            }
        }
        let word = match polarity {
            Polarity::Positive => Word::Keyword,
            Polarity::Negative if rng.random_bool(cfg.confusable_prob) => Word::Confusable,
            Polarity::Negative => Word::Other,
        };
        let (phonemes, word_voice) = match word {
            Word::Keyword => (KEYWORD_PHONEMES.to_vec(), voice.clone()),
            Word::Confusable => {
                let u = voice
                    .iter()
                    .zip(&lex.confusable_direction)
                    .map(|(v, d)| v + cfg.confusable_offset * d)
                    .collect();
                (KEYWORD_PHONEMES.to_vec(), u)
            }
            Word::Other => {
                let mut p = others.clone();
                p.shuffle(&mut rng);
                let n = rng.random_range(2..=KEYWORD_PHONEMES.len());
                (p[..n].to_vec(), voice.clone())
            }
        };
        let durations: Vec<usize> = phonemes
            .iter()
            .map(|_| {
                let jitter: i64 = rng.random_range(-1..=1);
                (base_duration as i64 + jitter).clamp(cfg.min_phoneme_frames as i64, cfg.max_phoneme_frames as i64) as usize
            })
            .collect();
        let span_len: usize = durations.iter().sum();
        let start = rng.random_range(2..=frames - span_len - 2);
        let mut f = start;
        for (&p, &dur) in phonemes.iter().zip(&durations) {
            let rendered = lex.render(p, &word_voice);
            for _ in 0..dur {
                for (v, r) in x[f * d..(f + 1) * d].iter_mut().zip(&rendered) {
                    *v += r;
                }
                f += 1;
            }
        }
        let labels = match word {
            Word::Keyword => LabelSequence::positive(frames, start, start + span_len),
            _ => LabelSequence::negative(frames),
        };
        utterances.push((id, polarity, Tensor::new(vec![frames, d], x)?, labels));
    }
    Ok(SpeakerDraft { profile, utterances })
}

fn feature_file(speaker_id: &str) -> String {
    format!("features/{speaker_id}.kwt")
}

/// Builds the whole corpus: speakers, utterances, splits, augmented train
/// copies and the enrollment store. Fully determined by `cfg`.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let lex = Lexicon::new(cfg);
    let mut drafts = Vec::with_capacity(cfg.total_speakers());
    let mut index = 0;
    for cell in &cfg.cells {
        for _ in 0..cell.speakers {
            drafts.push(generate_speaker(cfg, &lex, index, cell)?);
            index += 1;
        }
    }
    let speakers: Vec<SpeakerProfile> = drafts.iter().map(|d| d.profile.clone()).collect();
    let assignment = split_by_speaker(&speakers, &cfg.split, seed::derive(cfg.seed, "corpus/split"))?;
    let simulator = cfg.simulator();

    let mut utterances = Vec::new();
    let mut enrollments = EnrollmentStore::new();
    for draft in drafts {
        let p = &draft.profile;
        let split = assignment[&p.speaker_id];
        let positives: Vec<String> = draft
            .utterances
            .iter()
            .filter(|u| u.1 == Polarity::Positive)
            .map(|u| u.0.clone())
            .collect();
        for pid in &positives {
            enrollments.enroll(&p.speaker_id, simulator.synth(p, pid, EmbeddingKind::Td)?)?;
            enrollments.enroll(&p.speaker_id, simulator.synth(p, pid, EmbeddingKind::Ti)?)?;
        }
        for (id, polarity, frames, labels) in draft.utterances {
            let record = UtteranceRecord {
                utterance_id: id.clone(),
                speaker_id: p.speaker_id.clone(),
                locale: p.locale,
                age_group: p.age_group,
                split,
                polarity,
                num_frames: frames.shape()[0],
                keyword_span: labels.keyword_span,
                snr_db: None,
                augment_of: None,
                feature_file: feature_file(&p.speaker_id),
                feature_key: format!("{id}/x"),
                label_key: format!("{id}/y"),
                enrollment_refs: positives.iter().filter(|e| **e != id).cloned().collect(),
            };
            let original = Utterance {
                features: FeatureSequence {
                    frames,
                    utterance_id: id.clone(),
                    speaker_id: p.speaker_id.clone(),
                },
                labels,
                record,
            };
            let mut copies = Vec::new();
            if split == Split::Train {
                for c in 0..cfg.augment_copies {
                    let aug_seed = seed::derive(cfg.seed, &format!("corpus/augment/{id}/{c}"));
                    let snr = cfg.min_snr_db
                        + (cfg.max_snr_db - cfg.min_snr_db) * seed::rng(aug_seed).random::<f64>();
                    let aug_id = format!("{id}~a{c}");
                    let mut features = augment_noise(&original.features, snr, aug_seed)?;
                    features.utterance_id = aug_id.clone();
                    let record = UtteranceRecord {
                        utterance_id: aug_id.clone(),
                        snr_db: Some(snr),
                        augment_of: Some(id.clone()),
                        feature_key: format!("{aug_id}/x"),
                        label_key: format!("{aug_id}/y"),
                        ..original.record.clone()
                    };
                    copies.push(Utterance {
                        record,
                        features,
                        labels: original.labels.clone(),
                    });
                }
            }
            utterances.push(original);
            utterances.extend(copies);
        }
    }
    Ok(Corpus {
        config: cfg.clone(),
        speakers,
        utterances,
        enrollments,
    })
}
