use serde::{Deserialize, Serialize};

use crate::error::{KwsError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderLayerConfig {
    pub nodes: usize,
    pub memory: usize,
    pub bottleneck: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderLayerConfig {
    pub nodes: usize,
    pub memory: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Conditioning {
    None,
    Film { embedding_dim: usize },
}

impl Conditioning {
    pub fn embedding_dim(self) -> Option<usize> {
        match self {
            Conditioning::None => None,
            Conditioning::Film { embedding_dim } => Some(embedding_dim),
        }
    }
}

/// Architecture of the detector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KwsModelConfig {
    pub input_dim: usize,
    pub encoder: Vec<EncoderLayerConfig>,
    pub decoder: Vec<DecoderLayerConfig>,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    pub conditioning: Conditioning,
}

fn default_classes() -> usize {
    2
}

/// 40 log-mel bins, stacked with one frame of left context.
pub const PAPER_INPUT_DIM: usize = 80;

impl KwsModelConfig {
    /// Production-size architecture: 4 × (SVDF 576, memory 6, bottleneck 64)
    /// encoder and 3 × (SVDF 32, memory 32) decoder.
    pub fn paper(conditioning: Conditioning) -> Self {
        Self {
            input_dim: PAPER_INPUT_DIM,
            encoder: vec![
                EncoderLayerConfig {
                    nodes: 576,
                    memory: 6,
                    bottleneck: 64,
                };
                4
            ],
            decoder: vec![DecoderLayerConfig { nodes: 32, memory: 32 }; 3],
            num_classes: 2,
            conditioning,
        }
    }

    /// Small architecture used for the synthetic desk-scale experiments.
    pub fn desk(input_dim: usize, conditioning: Conditioning) -> Self {
        Self {
            input_dim,
            encoder: vec![
                EncoderLayerConfig {
                    nodes: 32,
                    memory: 6,
                    bottleneck: 16,
                };
                2
            ],
            decoder: vec![DecoderLayerConfig { nodes: 16, memory: 16 }; 2],
            num_classes: 2,
            conditioning,
        }
    }

    pub fn with_conditioning(&self, conditioning: Conditioning) -> Self {
        Self {
            conditioning,
            ..self.clone()
        }
    }

    /// Width of the encoder output that FiLM modulates.
    pub fn logits_dim(&self) -> usize {
        self.encoder.last().map_or(self.input_dim, |l| l.bottleneck)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(KwsError::Config(msg));
        if self.input_dim == 0 {
            return bad("input_dim must be positive".into());
        }
        if self.encoder.is_empty() || self.decoder.is_empty() {
            return bad("encoder and decoder need at least one layer each".into());
        }
        for (i, l) in self.encoder.iter().enumerate() {
            if l.nodes == 0 || l.memory == 0 || l.bottleneck == 0 {
                return bad(format!("encoder layer {i} has a zero dimension: {l:?}"));
            }
        }
        for (i, l) in self.decoder.iter().enumerate() {
            if l.nodes == 0 || l.memory == 0 {
                return bad(format!("decoder layer {i} has a zero dimension: {l:?}"));
            }
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2".into());
        }
        if self.conditioning == (Conditioning::Film { embedding_dim: 0 }) {
            return bad("film embedding_dim must be positive".into());
        }
        Ok(())
    }

    /// Closed-form parameter count, independent of any built model.
    ///
    /// SVDF: `N·D + N·T + N`; dense: `out·in + out`; FiLM: `2·L·(E + 1)`.
    pub fn closed_form_params(&self) -> usize {
        let mut total = 0;
        let mut dim = self.input_dim;
        for l in &self.encoder {
            total += l.nodes * dim + l.nodes * l.memory + l.nodes;
            total += l.bottleneck * l.nodes + l.bottleneck;
            dim = l.bottleneck;
        }
        if let Conditioning::Film { embedding_dim } = self.conditioning {
            total += 2 * dim * (embedding_dim + 1);
        }
        for l in &self.decoder {
            total += l.nodes * dim + l.nodes * l.memory + l.nodes;
            dim = l.nodes;
        }
        total + self.num_classes * dim + self.num_classes
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_config_closed_form() {
        // encoder: (576·80 + 576·6 + 576) + 3·(576·64 + 576·6 + 576) + 4·(64·576 + 64)
        // decoder: (32·64 + 32·32 + 32) + 2·(32·32 + 32·32 + 32); head: 2·32 + 2
        let base = KwsModelConfig::paper(Conditioning::None);
        assert_eq!(base.closed_form_params(), 327_842);
        let film = KwsModelConfig::paper(Conditioning::Film { embedding_dim: 64 });
        assert_eq!(film.closed_form_params() - base.closed_form_params(), 8_320);
    }

    #[test]
    fn json_rejects_unknown_keys() {
        let text = r#"{"input_dim": 4, "encoder": [], "decoder": [], "conditioning": {"type": "none"}, "extra": 1}"#;
        assert!(serde_json::from_str::<KwsModelConfig>(text).is_err());
    }

    #[test]
    fn zero_dims_fail_validation() {
        let mut c = KwsModelConfig::desk(8, Conditioning::None);
        c.decoder[0].memory = 0;
        assert!(c.validate().is_err());
    }
}
