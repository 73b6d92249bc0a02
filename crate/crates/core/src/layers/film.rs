use crate::error::{KwsError, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Affine projections of a speaker embedding into per-feature scale
/// (`gamma`) and shift (`beta`) of the encoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct FilmParams {
    /// `[L × E]`
    pub w_gamma: Tensor,
    pub b_gamma: Tensor,
    /// `[L × E]`
    pub w_beta: Tensor,
    pub b_beta: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct FilmVars {
    pub w_gamma: Var,
    pub b_gamma: Var,
    pub w_beta: Var,
    pub b_beta: Var,
}

impl FilmParams {
    /// Zero weights, unit scale, zero shift: the identity modulation for
    /// every embedding.
    pub fn identity(logits_dim: usize, embedding_dim: usize) -> Result<Self> {
        if logits_dim == 0 || embedding_dim == 0 {
            return Err(KwsError::Config("film dims must be positive".into()));
        }
        Ok(Self {
            w_gamma: Tensor::zeros(&[logits_dim, embedding_dim]),
            b_gamma: Tensor::filled(&[logits_dim], 1.0),
            w_beta: Tensor::zeros(&[logits_dim, embedding_dim]),
            b_beta: Tensor::zeros(&[logits_dim]),
        })
    }

    pub fn logits_dim(&self) -> usize {
        self.w_gamma.shape()[0]
    }

    pub fn embedding_dim(&self) -> usize {
        self.w_gamma.shape()[1]
    }

    /// `2·L·(E + 1)`
    pub fn param_count(&self) -> usize {
        2 * self.logits_dim() * (self.embedding_dim() + 1)
    }

    /// `gamma = W_γ·e + b_γ`, `beta = W_β·e + b_β`.
    pub fn project(&self, embedding: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if embedding.len() != self.embedding_dim() {
            return Err(KwsError::dim("film_project", &[embedding.len()], self.w_gamma.shape()));
        }
        let affine = |w: &Tensor, b: &Tensor| -> Vec<f64> {
            (0..self.logits_dim())
                .map(|o| w.row(o).iter().zip(embedding).map(|(a, e)| a * e).sum::<f64>() + b.data()[o])
                .collect()
        };
        Ok((affine(&self.w_gamma, &self.b_gamma), affine(&self.w_beta, &self.b_beta)))
    }

    pub fn bind(&self, tape: &mut Tape) -> FilmVars {
        FilmVars {
            w_gamma: tape.leaf(self.w_gamma.clone()),
            b_gamma: tape.leaf(self.b_gamma.clone()),
            w_beta: tape.leaf(self.w_beta.clone()),
            b_beta: tape.leaf(self.b_beta.clone()),
        }
    }

    pub(crate) fn tensors(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("w_gamma", &self.w_gamma),
            ("b_gamma", &self.b_gamma),
            ("w_beta", &self.w_beta),
            ("b_beta", &self.b_beta),
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w_gamma, &mut self.b_gamma, &mut self.w_beta, &mut self.b_beta]
    }
}

impl FilmVars {
    /// Projects `embedding: [1 × E]` to `(gamma, beta)`, each `[1 × L]`.
    pub fn project(&self, tape: &mut Tape, embedding: Var) -> Result<(Var, Var)> {
        let g = tape.matmul_t(embedding, self.w_gamma)?;
        let gamma = tape.add(g, self.b_gamma)?;
        let b = tape.matmul_t(embedding, self.w_beta)?;
        let beta = tape.add(b, self.b_beta)?;
        Ok((gamma, beta))
    }

    /// `gamma ⊙ l + beta`, broadcast over frames.
    pub fn apply(tape: &mut Tape, logits: Var, gamma: Var, beta: Var) -> Result<Var> {
        let scaled = tape.mul(logits, gamma)?;
        tape.add(scaled, beta)
    }
}

/// Per frame, `gamma ⊙ l + beta`.
pub fn film_apply(logits: &Tensor, gamma: &[f64], beta: &[f64]) -> Result<Tensor> {
    let width = logits.last_dim();
    if gamma.len() != width || beta.len() != width {
        return Err(KwsError::dim("film_apply", logits.shape(), &[gamma.len(), beta.len()]));
    }
    let data = logits
        .data()
        .iter()
        .enumerate()
        .map(|(i, l)| gamma[i % width] * l + beta[i % width])
        .collect();
    Tensor::new(logits.shape().to_vec(), data)
}
