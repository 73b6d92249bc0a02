//! On-disk corpus layout:
//!
//! ```text
//! <dir>/config.json          corpus generation config
//! <dir>/speakers.jsonl       one SpeakerProfile per line
//! <dir>/manifest.jsonl       one UtteranceRecord per line
//! <dir>/enrollments.jsonl    enrollment embeddings
//! <dir>/features/<spk>.kwt   tensor archive with "<utt>/x" and "<utt>/y"
//! ```

use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::corpus::{Corpus, CorpusConfig};
use super::{FeatureSequence, LabelSequence, Utterance, UtteranceRecord, KEYWORD, NON_KEYWORD};
use crate::archive;
use crate::error::{KwsError, Result};
use crate::numerics::Tensor;
use crate::speaker::{EnrollmentStore, SpeakerProfile};

pub const CORPUS_CONFIG_FILE: &str = "config.json";
pub const SPEAKERS_FILE: &str = "speakers.jsonl";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const ENROLLMENTS_FILE: &str = "enrollments.jsonl";

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| KwsError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n").map_err(|e| KwsError::io(path, e))?;
    }
    w.flush().map_err(|e| KwsError::io(path, e))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| KwsError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| KwsError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| KwsError::Data(format!("{}:{}: {e}", path.display(), i + 1)))?);
    }
    Ok(out)
}

fn labels_tensor(labels: &LabelSequence) -> Tensor {
    Tensor::vector(labels.labels.iter().map(|&l| l as f64).collect())
}

/// SHA-256 of the manifest file; identifies a corpus in reports.
pub fn corpus_fingerprint(dir: &Path) -> Result<String> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = std::fs::read(&path).map_err(|e| KwsError::io(&path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Corpus {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let features = dir.join("features");
        std::fs::create_dir_all(&features).map_err(|e| KwsError::io(&features, e))?;
        let cfg_path = dir.join(CORPUS_CONFIG_FILE);
        let cfg = serde_json::to_string_pretty(&self.config)? + "\n";
        std::fs::write(&cfg_path, cfg).map_err(|e| KwsError::io(&cfg_path, e))?;
        write_jsonl(&dir.join(SPEAKERS_FILE), &self.speakers)?;
        write_jsonl(&dir.join(MANIFEST_FILE), self.utterances.iter().map(|u| &u.record))?;
        self.enrollments.write_jsonl(&dir.join(ENROLLMENTS_FILE))?;

        let mut by_file: BTreeMap<&str, Vec<&Utterance>> = BTreeMap::new();
        for u in &self.utterances {
            by_file.entry(&u.record.feature_file).or_default().push(u);
        }
        for (file, utts) in by_file {
            let labels: Vec<Tensor> = utts.iter().map(|u| labels_tensor(&u.labels)).collect();
            let mut tensors = Vec::with_capacity(2 * utts.len());
            for (u, y) in utts.iter().zip(&labels) {
                tensors.push((u.record.feature_key.clone(), &u.features.frames));
                tensors.push((u.record.label_key.clone(), y));
            }
            let header = serde_json::json!({ "kind": "kws-features" });
            archive::write(&dir.join(file), &header, &tensors)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Corpus> {
        let cfg_path = dir.join(CORPUS_CONFIG_FILE);
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| KwsError::io(&cfg_path, e))?;
        let config: CorpusConfig =
            serde_json::from_str(&text).map_err(|e| KwsError::Data(format!("{}: {e}", cfg_path.display())))?;
        let speakers: Vec<SpeakerProfile> = read_jsonl(&dir.join(SPEAKERS_FILE))?;
        let records: Vec<UtteranceRecord> = read_jsonl(&dir.join(MANIFEST_FILE))?;
        let enrollments = EnrollmentStore::read_jsonl(&dir.join(ENROLLMENTS_FILE))?;

        let mut archives: BTreeMap<String, archive::Archive> = BTreeMap::new();
        let mut utterances = Vec::with_capacity(records.len());
        for record in records {
            if !archives.contains_key(&record.feature_file) {
                let a = archive::read(&dir.join(&record.feature_file))?;
                archives.insert(record.feature_file.clone(), a);
            }
            let a = archives.get_mut(&record.feature_file).expect("inserted above");
            let missing = |key: &str| KwsError::Data(format!("{}: missing tensor `{key}`", record.feature_file));
            let frames = a.take(&record.feature_key).ok_or_else(|| missing(&record.feature_key))?;
            let y = a.take(&record.label_key).ok_or_else(|| missing(&record.label_key))?;
            let (n, _) = frames.matrix_dims("load_corpus")?;
            if n != record.num_frames || y.len() != n {
                return Err(KwsError::Data(format!(
                    "{}: {} frames / {} labels on disk, manifest says {}",
                    record.utterance_id,
                    n,
                    y.len(),
                    record.num_frames
                )));
            }
            let labels = LabelSequence {
                labels: y.data().iter().map(|&v| if v == 1.0 { KEYWORD } else { NON_KEYWORD }).collect(),
                keyword_span: record.keyword_span,
            };
            if !labels.is_valid() {
                return Err(KwsError::Data(format!("{}: labels disagree with keyword span", record.utterance_id)));
            }
            utterances.push(Utterance {
                features: FeatureSequence {
                    frames,
                    utterance_id: record.utterance_id.clone(),
                    speaker_id: record.speaker_id.clone(),
                },
                labels,
                record,
            });
        }
        Ok(Corpus {
            config,
            speakers,
            utterances,
            enrollments,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_corpus;

    #[test]
    fn write_then_load_round_trips() {
        let mut cfg = CorpusConfig::default();
        for c in &mut cfg.cells {
            c.speakers = 3;
            c.underrepresented = false;
        }
        cfg.positives_per_speaker = 2;
        cfg.negatives_per_speaker = 2;
        let corpus = generate_corpus(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        corpus.write(dir.path()).unwrap();
        let back = Corpus::load(dir.path()).unwrap();
        assert_eq!(back.config, corpus.config);
        assert_eq!(back.speakers, corpus.speakers);
        assert_eq!(back.utterances, corpus.utterances);
        assert_eq!(back.enrollments, corpus.enrollments);
    }
}
