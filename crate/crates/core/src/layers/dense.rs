use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::glorot;
use crate::error::{KwsError, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    None,
}

/// Fully connected layer, `y = act(x · Wᵀ + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    /// `[out × in]`
    pub weights: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy)]
pub struct DenseVars {
    pub weights: Var,
    pub bias: Var,
    pub activation: Activation,
}

impl DenseParams {
    pub fn init(out: usize, input: usize, activation: Activation, rng: &mut ChaCha8Rng) -> Result<Self> {
        if out == 0 || input == 0 {
            return Err(KwsError::Config(format!("dense dims must be positive ({out}×{input})")));
        }
        Ok(Self {
            weights: glorot(rng, out, input),
            bias: Tensor::zeros(&[out]),
            activation,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn input_dim(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.output_dim() * self.input_dim() + self.output_dim()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul_t(&self.weights)?;
        let b = self.bias.data();
        let relu = self.activation == Activation::Relu;
        let data = y
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let z = v + b[i % b.len()];
                if relu {
                    z.max(0.0)
                } else {
                    z
                }
            })
            .collect();
        Tensor::new(y.shape().to_vec(), data)
    }

    /// Single-frame forward used by streaming inference.
    pub fn forward_frame(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(KwsError::dim("dense", &[x.len()], self.weights.shape()));
        }
        Ok((0..self.output_dim())
            .map(|o| {
                let z: f64 = self.weights.row(o).iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
                    + self.bias.data()[o];
                match self.activation {
                    Activation::Relu => z.max(0.0),
                    Activation::None => z,
                }
            })
            .collect())
    }

    pub fn bind(&self, tape: &mut Tape) -> DenseVars {
        DenseVars {
            weights: tape.leaf(self.weights.clone()),
            bias: tape.leaf(self.bias.clone()),
            activation: self.activation,
        }
    }

    pub(crate) fn tensors(&self) -> [(&'static str, &Tensor); 2] {
        [("weights", &self.weights), ("bias", &self.bias)]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.weights, &mut self.bias]
    }
}

impl DenseVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul_t(x, self.weights)?;
        let y = tape.add(y, self.bias)?;
        Ok(match self.activation {
            Activation::Relu => tape.relu(y),
            Activation::None => y,
        })
    }
}
