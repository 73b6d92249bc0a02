use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Split;
use crate::error::{KwsError, Result};
use crate::seed;
use crate::speaker::{AgeGroup, Locale, SpeakerProfile};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub dev: f64,
    pub eval: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.6,
            dev: 0.1,
            eval: 0.3,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.dev, self.eval];
        if all.iter().any(|f| !f.is_finite() || *f <= 0.0) || (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(KwsError::Config(format!(
                "split fractions must be positive and sum to 1, got {}/{}/{}",
                self.train, self.dev, self.eval
            )));
        }
        Ok(())
    }
}

/// Assigns whole speakers to splits, stratified by (locale, age group).
///
/// Each cell is shuffled with a cell-specific seed and cut by rounded
/// fractions; dev and eval each get at least one speaker and train keeps
/// the remainder. Cells with fewer than 3 speakers cannot cover all three
/// splits and are rejected by name.
pub fn split_by_speaker(
    speakers: &[SpeakerProfile],
    fractions: &SplitFractions,
    seed: u64,
) -> Result<BTreeMap<String, Split>> {
    fractions.validate()?;
    let mut cells: BTreeMap<(Locale, AgeGroup), Vec<&str>> = BTreeMap::new();
    for s in speakers {
        cells.entry((s.locale, s.age_group)).or_default().push(&s.speaker_id);
    }
    let mut out = BTreeMap::new();
    for ((locale, age), mut ids) in cells {
        let n = ids.len();
        if n < 3 {
            return Err(KwsError::Config(format!(
                "cell ({}, {}) has {n} speaker(s); a speaker-disjoint train/dev/eval split needs at least 3",
                locale.as_str(),
                age.as_str()
            )));
        }
        ids.sort_unstable();
        let mut rng = seed::rng(seed::derive(seed, &format!("split/{}/{}", locale.as_str(), age.as_str())));
        ids.shuffle(&mut rng);
        let n_dev = ((fractions.dev * n as f64).round() as usize).max(1);
        let n_eval = ((fractions.eval * n as f64).round() as usize).max(1).min(n - n_dev - 1);
        for (i, id) in ids.into_iter().enumerate() {
            let split = if i < n_eval {
                Split::Eval
            } else if i < n_eval + n_dev {
                Split::Dev
            } else {
                Split::Train
            };
            out.insert(id.to_string(), split);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn speakers(cells: &[(Locale, AgeGroup, usize)]) -> Vec<SpeakerProfile> {
        let mut out = Vec::new();
        for &(locale, age_group, n) in cells {
            for _ in 0..n {
                out.push(SpeakerProfile {
                    speaker_id: format!("s{:03}", out.len()),
                    locale,
                    age_group,
                    voice: vec![],
                    group_shift: vec![],
                });
            }
        }
        out
    }

    #[test]
    fn every_cell_reaches_every_split() {
        let spk = speakers(&[(Locale::A, AgeGroup::Adult, 30), (Locale::B, AgeGroup::Child, 10), (Locale::C, AgeGroup::Adult, 3)]);
        let asg = split_by_speaker(&spk, &SplitFractions::default(), 1).unwrap();
        assert_eq!(asg.len(), spk.len());
        for cell in [(Locale::A, AgeGroup::Adult), (Locale::B, AgeGroup::Child), (Locale::C, AgeGroup::Adult)] {
            for split in Split::ALL {
                assert!(spk
                    .iter()
                    .any(|s| (s.locale, s.age_group) == cell && asg[&s.speaker_id] == split));
            }
        }
        let count = |sp| spk[..30].iter().filter(|s| asg[&s.speaker_id] == sp).count();
        assert_eq!((count(Split::Train), count(Split::Dev), count(Split::Eval)), (18, 3, 9));
    }

    #[test]
    fn tiny_cell_is_named_in_error() {
        let spk = speakers(&[(Locale::A, AgeGroup::Adult, 30), (Locale::D, AgeGroup::Child, 2)]);
        let err = split_by_speaker(&spk, &SplitFractions::default(), 1).unwrap_err().to_string();
        assert!(err.contains("(D, child)"), "{err}");
    }

    #[test]
    fn bad_fractions_rejected() {
        let f = SplitFractions {
            train: 0.5,
            dev: 0.5,
            eval: 0.5,
        };
        assert!(matches!(f.validate(), Err(KwsError::Config(_))));
    }

    #[test]
    fn split_is_seed_deterministic() {
        let spk = speakers(&[(Locale::A, AgeGroup::Adult, 20)]);
        let a = split_by_speaker(&spk, &SplitFractions::default(), 5).unwrap();
        let b = split_by_speaker(&spk, &SplitFractions::default(), 5).unwrap();
        assert_eq!(a, b);
    }
}
