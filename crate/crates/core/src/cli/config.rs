use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{CorpusConfig, Split};
use crate::error::{KwsError, Result};
use crate::eval::{Condition, MissingEnrollment, DEFAULT_SMOOTH_WINDOW};
use crate::seed;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub checkpoint: Option<PathBuf>,
    pub split: Split,
    pub condition: Condition,
    pub smooth_window: usize,
    pub missing_enrollment: MissingEnrollment,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            split: Split::Eval,
            condition: Condition::With,
            smooth_window: DEFAULT_SMOOTH_WINDOW,
            missing_enrollment: MissingEnrollment::Fail,
        }
    }
}

/// One JSON document configuring every command. The `seed` fields inside
/// `corpus` and `train` are overwritten with sub-seeds of the master `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus_dir: PathBuf,
    pub out_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            corpus_dir: PathBuf::from("corpus"),
            out_dir: PathBuf::from("run"),
            corpus: CorpusConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

pub const RESOLVED_CONFIG_FILE: &str = "run_config.json";

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| KwsError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| KwsError::Config(format!("{}: {e}", path.display())))
    }

    /// Derives the sub-seeds from the master seed.
    pub fn resolve_seeds(&mut self) {
        self.corpus.seed = seed::derive(self.seed, "corpus");
        self.train.seed = seed::derive(self.seed, "train");
    }

    pub fn eval_seed(&self) -> u64 {
        seed::derive(self.seed, "eval")
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| KwsError::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(&path, text).map_err(|e| KwsError::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"seed": 3, "sede": 4}"#).unwrap_err();
        assert!(err.to_string().contains("sede"));
        let err = serde_json::from_str::<RunConfig>(r#"{"train": {"stepz": 4}}"#).unwrap_err();
        assert!(err.to_string().contains("stepz"));
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"seed": 9, "train": {"steps": 5}}"#).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.train.steps, 5);
        assert_eq!(c.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut c = RunConfig::default();
        c.resolve_seeds();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
    }
}
