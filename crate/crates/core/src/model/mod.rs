//! Encoder/decoder detector with optional FiLM conditioning between the two.

mod checkpoint;
mod config;
mod stream;

pub use checkpoint::{Checkpoint, OptimizerMoments, CHECKPOINT_KIND};
pub use config::{Conditioning, DecoderLayerConfig, EncoderLayerConfig, KwsModelConfig, PAPER_INPUT_DIM};
pub use stream::StreamSession;

use serde::Serialize;

use crate::error::{KwsError, Result};
use crate::layers::{film_apply, Activation, DenseParams, DenseVars, FilmParams, FilmVars, SvdfLayerParams, SvdfVars};
use crate::numerics::{softmax_rows, Tape, Tensor, Var};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub svdf: SvdfLayerParams,
    /// Linear projection to the bottleneck width.
    pub bottleneck: DenseParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KwsModel {
    config: KwsModelConfig,
    pub encoder: Vec<EncoderBlock>,
    pub film: Option<FilmParams>,
    pub decoder: Vec<SvdfLayerParams>,
    pub head: DenseParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    pub encoder: usize,
    pub film: usize,
    pub decoder: usize,
    pub head: usize,
    pub total: usize,
}

/// Model parameters recorded as leaves of one tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    /// Leaves in [`KwsModel::named_params`] order.
    pub vars: Vec<Var>,
    encoder: Vec<(SvdfVars, DenseVars)>,
    film: Option<FilmVars>,
    decoder: Vec<SvdfVars>,
    head: DenseVars,
}

impl KwsModel {
    /// Deterministic initialization from `seed`. FiLM starts as the identity
    /// modulation and consumes no randomness, so a conditioned and an
    /// unconditioned model built from the same seed share every other weight.
    pub fn build(config: &KwsModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed::derive(seed, "model-init"));
        let mut dim = config.input_dim;
        let mut encoder = Vec::with_capacity(config.encoder.len());
        for l in &config.encoder {
            let svdf = SvdfLayerParams::init(l.nodes, dim, l.memory, &mut rng)?;
            let bottleneck = DenseParams::init(l.bottleneck, l.nodes, Activation::None, &mut rng)?;
            encoder.push(EncoderBlock { svdf, bottleneck });
            dim = l.bottleneck;
        }
        let film = match config.conditioning {
            Conditioning::None => None,
            Conditioning::Film { embedding_dim } => Some(FilmParams::identity(dim, embedding_dim)?),
        };
        let mut decoder = Vec::with_capacity(config.decoder.len());
        for l in &config.decoder {
            decoder.push(SvdfLayerParams::init(l.nodes, dim, l.memory, &mut rng)?);
            dim = l.nodes;
        }
        let head = DenseParams::init(config.num_classes, dim, Activation::None, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            encoder,
            film,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &KwsModelConfig {
        &self.config
    }

    pub fn is_conditioned(&self) -> bool {
        self.film.is_some()
    }

    pub fn embedding_dim(&self) -> Option<usize> {
        self.film.as_ref().map(FilmParams::embedding_dim)
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.encoder.iter().enumerate() {
            for (n, t) in b.svdf.tensors() {
                out.push((format!("encoder.{i}.svdf.{n}"), t));
            }
            for (n, t) in b.bottleneck.tensors() {
                out.push((format!("encoder.{i}.bottleneck.{n}"), t));
            }
        }
        if let Some(f) = &self.film {
            for (n, t) in f.tensors() {
                out.push((format!("film.{n}"), t));
            }
        }
        for (i, l) in self.decoder.iter().enumerate() {
            for (n, t) in l.tensors() {
                out.push((format!("decoder.{i}.svdf.{n}"), t));
            }
        }
        for (n, t) in self.head.tensors() {
            out.push((format!("head.{n}"), t));
        }
        out
    }

    /// Same order as [`Self::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for b in &mut self.encoder {
            out.extend(b.svdf.tensors_mut());
            out.extend(b.bottleneck.tensors_mut());
        }
        if let Some(f) = &mut self.film {
            out.extend(f.tensors_mut());
        }
        for l in &mut self.decoder {
            out.extend(l.tensors_mut());
        }
        out.extend(self.head.tensors_mut());
        out
    }

    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn count_params(&self) -> ParamBreakdown {
        let encoder = self
            .encoder
            .iter()
            .map(|b| b.svdf.param_count() + b.bottleneck.param_count())
            .sum();
        let film = self.film.as_ref().map_or(0, FilmParams::param_count);
        let decoder = self.decoder.iter().map(SvdfLayerParams::param_count).sum();
        let head = self.head.param_count();
        ParamBreakdown {
            encoder,
            film,
            decoder,
            head,
            total: encoder + film + decoder + head,
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, dim) = x.matrix_dims("forward")?;
        if dim != self.config.input_dim {
            return Err(KwsError::dim("forward", x.shape(), &[self.config.input_dim]));
        }
        Ok(())
    }

    /// Resolves the `(gamma, beta)` pair for a conditioned model, or `None`
    /// for an unconditioned one (which ignores `embedding`).
    pub fn modulation(&self, embedding: Option<&[f64]>) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
        match (&self.film, embedding) {
            (None, _) => Ok(None),
            (Some(f), Some(e)) => f.project(e).map(Some),
            (Some(_), None) => Err(KwsError::Usage(
                "conditioned model needs a speaker embedding; pass the constant (absent) vector \
                 when no enrollment exists"
                    .into(),
            )),
        }
    }

    /// Frame logits `[frames × classes]` for `x: [frames × input_dim]`.
    pub fn forward(&self, x: &Tensor, embedding: Option<&[f64]>) -> Result<Tensor> {
        self.check_input(x)?;
        let modulation = self.modulation(embedding)?;
        let mut h = x.clone();
        for b in &self.encoder {
            h = b.svdf.forward_batch(&h)?;
            h = b.bottleneck.forward(&h)?;
        }
        if let Some((gamma, beta)) = modulation {
            h = film_apply(&h, &gamma, &beta)?;
        }
        for l in &self.decoder {
            h = l.forward_batch(&h)?;
        }
        self.head.forward(&h)
    }

    /// Per-frame class posteriors.
    pub fn posteriors(&self, x: &Tensor, embedding: Option<&[f64]>) -> Result<Tensor> {
        Ok(softmax_rows(&self.forward(x, embedding)?))
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let vars: Vec<Var> = self.named_params().into_iter().map(|(_, t)| tape.leaf(t.clone())).collect();
        self.bind_vars(&vars).expect("vars built from this model")
    }

    /// Interprets `vars` (in [`Self::named_params`] order) as this model's parameters.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundModel> {
        if vars.len() != self.named_params().len() {
            return Err(KwsError::dim("bind_vars", &[vars.len()], &[self.named_params().len()]));
        }
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("length checked");
        let mut encoder = Vec::new();
        for b in &self.encoder {
            let s = SvdfVars {
                feature_filters: next(),
                time_filters: next(),
                bias: next(),
            };
            let d = DenseVars {
                weights: next(),
                bias: next(),
                activation: b.bottleneck.activation,
            };
            encoder.push((s, d));
        }
        let film = self.film.as_ref().map(|_| FilmVars {
            w_gamma: next(),
            b_gamma: next(),
            w_beta: next(),
            b_beta: next(),
        });
        let decoder = self
            .decoder
            .iter()
            .map(|_| SvdfVars {
                feature_filters: next(),
                time_filters: next(),
                bias: next(),
            })
            .collect();
        let head = DenseVars {
            weights: next(),
            bias: next(),
            activation: self.head.activation,
        };
        Ok(BoundModel {
            vars: vars.to_vec(),
            encoder,
            film,
            decoder,
            head,
        })
    }
}

impl BoundModel {
    /// Records the forward pass and returns the frame logits.
    pub fn forward(&self, tape: &mut Tape, x: &Tensor, embedding: Option<&[f64]>) -> Result<Var> {
        let mut h = tape.constant(x.clone());
        for (s, d) in &self.encoder {
            h = s.forward(tape, h)?;
            h = d.forward(tape, h)?;
        }
        if let Some(film) = &self.film {
            let e = embedding.ok_or_else(|| {
                KwsError::Usage("conditioned model needs a speaker embedding (use the constant vector)".into())
            })?;
            let e = tape.constant(Tensor::new(vec![1, e.len()], e.to_vec())?);
            let (gamma, beta) = film.project(tape, e)?;
            h = FilmVars::apply(tape, h, gamma, beta)?;
        }
        for s in &self.decoder {
            h = s.forward(tape, h)?;
        }
        self.head.forward(tape, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_weights() {
        let c = KwsModelConfig::desk(8, Conditioning::Film { embedding_dim: 4 });
        assert_eq!(KwsModel::build(&c, 3).unwrap(), KwsModel::build(&c, 3).unwrap());
        assert_ne!(KwsModel::build(&c, 3).unwrap(), KwsModel::build(&c, 4).unwrap());
    }

    #[test]
    fn breakdown_matches_closed_form() {
        for cond in [Conditioning::None, Conditioning::Film { embedding_dim: 64 }] {
            let c = KwsModelConfig::paper(cond);
            let m = KwsModel::build(&c, 0).unwrap();
            let b = m.count_params();
            assert_eq!(b.total, c.closed_form_params());
            assert_eq!(b.total, b.encoder + b.film + b.decoder + b.head);
        }
    }

    #[test]
    fn conditioned_model_requires_embedding_object() {
        let c = KwsModelConfig::desk(4, Conditioning::Film { embedding_dim: 3 });
        let m = KwsModel::build(&c, 1).unwrap();
        let x = Tensor::zeros(&[5, 4]);
        assert!(matches!(m.forward(&x, None), Err(KwsError::Usage(_))));
        assert!(m.forward(&x, Some(&[0.0; 3])).is_ok());
    }

    #[test]
    fn unconditioned_model_ignores_embedding() {
        let c = KwsModelConfig::desk(4, Conditioning::None);
        let m = KwsModel::build(&c, 1).unwrap();
        let x = crate::layers::glorot(&mut seed::rng(9), 7, 4);
        assert_eq!(m.forward(&x, None).unwrap(), m.forward(&x, Some(&[1.0, 2.0])).unwrap());
    }

    #[test]
    fn tape_and_plain_forward_agree() {
        let c = KwsModelConfig::desk(6, Conditioning::Film { embedding_dim: 3 });
        let mut m = KwsModel::build(&c, 2).unwrap();
        let mut rng = seed::rng(10);
        let f = m.film.as_mut().unwrap();
        f.w_gamma = crate::layers::glorot(&mut rng, 16, 3);
        f.w_beta = crate::layers::glorot(&mut rng, 16, 3);
        let x = crate::layers::glorot(&mut rng, 25, 6);
        let e = [0.3, -0.2, 0.9];
        let plain = m.forward(&x, Some(&e)).unwrap();
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let y = bound.forward(&mut tape, &x, Some(&e)).unwrap();
        assert!(tape.value(y).max_abs_diff(&plain) < 1e-12);
    }
}
