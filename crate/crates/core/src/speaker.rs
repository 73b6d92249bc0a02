//! Speaker profiles, simulated speaker embeddings and the enrollment store.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{KwsError, Result};
use crate::numerics::Tensor;
use crate::seed;

pub const VOICE_DIM: usize = 16;
pub const TD_DIM: usize = 64;
pub const TI_DIM: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Locale {
    A,
    B,
    C,
    D,
}

impl Locale {
    pub const ALL: [Locale; 4] = [Locale::A, Locale::B, Locale::C, Locale::D];

    pub fn as_str(self) -> &'static str {
        match self {
            Locale::A => "A",
            Locale::B => "B",
            Locale::C => "C",
            Locale::D => "D",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| KwsError::Validation(format!("unknown locale `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgeGroup {
    Adult,
    Child,
}

impl AgeGroup {
    pub const ALL: [AgeGroup; 2] = [AgeGroup::Adult, AgeGroup::Child];

    pub fn as_str(self) -> &'static str {
        match self {
            AgeGroup::Adult => "adult",
            AgeGroup::Child => "child",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| KwsError::Validation(format!("unknown age group `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    pub locale: Locale,
    pub age_group: AgeGroup,
    /// Unit-norm latent voice vector.
    pub voice: Vec<f64>,
    /// Bias added to every feature frame of this speaker's group.
    pub group_shift: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EmbeddingKind {
    Td,
    Ti,
    Absent,
}

impl EmbeddingKind {
    pub fn dim(self) -> Option<usize> {
        match self {
            EmbeddingKind::Td => Some(TD_DIM),
            EmbeddingKind::Ti => Some(TI_DIM),
            EmbeddingKind::Absent => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnrollmentMode {
    #[serde(rename = "self")]
    SelfEnrollment,
    Cross,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerEmbedding {
    pub values: Vec<f64>,
    pub kind: EmbeddingKind,
    pub mode: EnrollmentMode,
    pub source_utterance_id: Option<String>,
}

impl SpeakerEmbedding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_absent(&self) -> bool {
        self.kind == EmbeddingKind::Absent
    }
}

/// The substitute used when no enrollment is available: zeros of width `dim`.
pub fn constant_vector(dim: usize) -> Result<SpeakerEmbedding> {
    if dim == 0 {
        return Err(KwsError::Validation("embedding dim must be positive".into()));
    }
    Ok(SpeakerEmbedding {
        values: vec![0.0; dim],
        kind: EmbeddingKind::Absent,
        mode: EnrollmentMode::None,
        source_utterance_id: None,
    })
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub(crate) fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Stand-in for the TD and TI speaker encoders: a fixed random projection of
/// the speaker's voice vector plus per-utterance noise, then L2 normalization.
#[derive(Debug, Clone)]
pub struct EmbeddingSimulator {
    projection_td: Tensor,
    projection_ti: Tensor,
    pub sigma_td: f64,
    pub sigma_ti: f64,
    noise_seed: u64,
}

pub const DEFAULT_SIGMA_TD: f64 = 0.1;
pub const DEFAULT_SIGMA_TI: f64 = 0.3;

impl EmbeddingSimulator {
    pub fn new(seed: u64, sigma_td: f64, sigma_ti: f64) -> Self {
        let projection = |purpose: &str, rows: usize| {
            let mut rng = seed::rng(seed::derive(seed, purpose));
            let scale = 1.0 / (rows as f64).sqrt();
            let data = (0..rows * VOICE_DIM)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    scale * z
                })
                .collect::<Vec<f64>>();
            Tensor::new(vec![rows, VOICE_DIM], data).expect("positive dims")
        };
        Self {
            projection_td: projection("embedding/td-projection", TD_DIM),
            projection_ti: projection("embedding/ti-projection", TI_DIM),
            sigma_td,
            sigma_ti,
            noise_seed: seed::derive(seed, "embedding/noise"),
        }
    }

    pub fn with_defaults(seed: u64) -> Self {
        Self::new(seed, DEFAULT_SIGMA_TD, DEFAULT_SIGMA_TI)
    }

    /// `normalize(P_kind · v + σ_kind · ε)` with `ε ~ N(0, I/E)` seeded by
    /// `(utterance_id, kind)`.
    pub fn synth(&self, profile: &SpeakerProfile, utterance_id: &str, kind: EmbeddingKind) -> Result<SpeakerEmbedding> {
        let (proj, sigma) = match kind {
            EmbeddingKind::Td => (&self.projection_td, self.sigma_td),
            EmbeddingKind::Ti => (&self.projection_ti, self.sigma_ti),
            EmbeddingKind::Absent => {
                return Err(KwsError::Validation("cannot synthesize an absent embedding".into()))
            }
        };
        if profile.voice.len() != VOICE_DIM {
            return Err(KwsError::dim("synth_embedding", &[profile.voice.len()], &[VOICE_DIM]));
        }
        let dim = proj.shape()[0];
        let tag = match kind {
            EmbeddingKind::Td => "td",
            _ => "ti",
        };
        let mut rng = seed::rng(seed::derive(self.noise_seed, &format!("{tag}/{utterance_id}")));
        let noise_scale = sigma / (dim as f64).sqrt();
        let mut values: Vec<f64> = (0..dim)
            .map(|r| {
                let clean: f64 = proj.row(r).iter().zip(&profile.voice).map(|(p, v)| p * v).sum();
                let eps: f64 = StandardNormal.sample(&mut rng);
                clean + noise_scale * eps
            })
            .collect();
        normalize(&mut values);
        Ok(SpeakerEmbedding {
            values,
            kind,
            mode: EnrollmentMode::Cross,
            source_utterance_id: Some(utterance_id.to_string()),
        })
    }
}

/// How the embedding for a query utterance is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    TiSelf,
    TiCross,
    TdCross,
    None,
}

impl Pairing {
    pub fn kind(self) -> EmbeddingKind {
        match self {
            Pairing::TiSelf | Pairing::TiCross => EmbeddingKind::Ti,
            Pairing::TdCross => EmbeddingKind::Td,
            Pairing::None => EmbeddingKind::Absent,
        }
    }

    pub fn embedding_dim(self) -> Option<usize> {
        self.kind().dim()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnrollmentRecord {
    speaker_id: String,
    kind: EmbeddingKind,
    dim: usize,
    values: Vec<f64>,
    source_utterance_id: Option<String>,
}

/// Stored enrollment embeddings per speaker.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EnrollmentStore {
    entries: BTreeMap<String, Vec<SpeakerEmbedding>>,
}

impl EnrollmentStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn enroll(&mut self, speaker_id: &str, embedding: SpeakerEmbedding) -> Result<()> {
        if embedding.is_absent() {
            return Err(KwsError::Validation("cannot enroll the absent constant vector".into()));
        }
        if embedding.values.iter().any(|v| !v.is_finite()) {
            return Err(KwsError::Validation("enrollment embedding is not finite".into()));
        }
        self.entries.entry(speaker_id.to_string()).or_default().push(SpeakerEmbedding {
            mode: EnrollmentMode::Cross,
            ..embedding
        });
        Ok(())
    }

    /// Enrollments of `kind` for `speaker_id`; empty when none exist.
    pub fn lookup(&self, speaker_id: &str, kind: EmbeddingKind) -> Vec<&SpeakerEmbedding> {
        self.entries
            .get(speaker_id)
            .map(|v| v.iter().filter(|e| e.kind == kind).collect())
            .unwrap_or_default()
    }

    pub fn speakers(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| KwsError::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for (speaker, embs) in &self.entries {
            for e in embs {
                let rec = EnrollmentRecord {
                    speaker_id: speaker.clone(),
                    kind: e.kind,
                    dim: e.dim(),
                    values: e.values.clone(),
                    source_utterance_id: e.source_utterance_id.clone(),
                };
                serde_json::to_writer(&mut w, &rec)?;
                w.write_all(b"\n").map_err(|e| KwsError::io(path, e))?;
            }
        }
        w.flush().map_err(|e| KwsError::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| KwsError::io(path, e))?;
        let mut store = Self::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| KwsError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: EnrollmentRecord = serde_json::from_str(&line)
                .map_err(|e| KwsError::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
            if rec.values.len() != rec.dim || rec.kind.dim().is_some_and(|d| d != rec.dim) {
                return Err(KwsError::Data(format!(
                    "{}:{}: dim {} does not match kind {:?} / {} values",
                    path.display(),
                    i + 1,
                    rec.dim,
                    rec.kind,
                    rec.values.len()
                )));
            }
            store.enroll(
                &rec.speaker_id,
                SpeakerEmbedding {
                    values: rec.values,
                    kind: rec.kind,
                    mode: EnrollmentMode::Cross,
                    source_utterance_id: rec.source_utterance_id,
                },
            )?;
        }
        Ok(store)
    }
}

/// Picks the embedding that conditions a query utterance.
///
/// Cross variants draw uniformly among the speaker's enrollments of the
/// right kind, excluding any whose source is `utterance_id` itself.
/// [`Pairing::None`] yields the constant vector of width `absent_dim`.
pub fn pair_enrollment(
    utterance_id: &str,
    profile: &SpeakerProfile,
    store: &EnrollmentStore,
    simulator: &EmbeddingSimulator,
    pairing: Pairing,
    absent_dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SpeakerEmbedding> {
    match pairing {
        Pairing::None => constant_vector(absent_dim),
        Pairing::TiSelf => {
            let mut e = simulator.synth(profile, utterance_id, EmbeddingKind::Ti)?;
            e.mode = EnrollmentMode::SelfEnrollment;
            Ok(e)
        }
        Pairing::TiCross | Pairing::TdCross => {
            let candidates: Vec<&SpeakerEmbedding> = store
                .lookup(&profile.speaker_id, pairing.kind())
                .into_iter()
                .filter(|e| e.source_utterance_id.as_deref() != Some(utterance_id))
                .collect();
            if candidates.is_empty() {
                return Err(KwsError::NoEnrollment(profile.speaker_id.clone()));
            }
            let pick = candidates[rng.random_range(0..candidates.len())].clone();
            Ok(SpeakerEmbedding {
                mode: EnrollmentMode::Cross,
                ..pick
            })
        }
    }
}
