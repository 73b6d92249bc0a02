use rand_chacha::ChaCha8Rng;

use super::glorot;
use crate::error::{KwsError, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Rank-1 factorized time-windowed layer: a per-node feature filter followed
/// by a causal filter over the last `memory` frames of that node.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdfLayerParams {
    /// `[nodes × input_dim]`
    pub feature_filters: Tensor,
    /// `[nodes × memory]`, column `memory − 1` weighs the current frame.
    pub time_filters: Tensor,
    /// `[nodes]`
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct SvdfVars {
    pub feature_filters: Var,
    pub time_filters: Var,
    pub bias: Var,
}

impl SvdfLayerParams {
    pub fn init(nodes: usize, input_dim: usize, memory: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if nodes == 0 || input_dim == 0 || memory == 0 {
            return Err(KwsError::Config(format!(
                "svdf dims must be positive (nodes {nodes}, input {input_dim}, memory {memory})"
            )));
        }
        Ok(Self {
            feature_filters: glorot(rng, nodes, input_dim),
            time_filters: glorot(rng, nodes, memory),
            bias: Tensor::zeros(&[nodes]),
        })
    }

    pub fn from_parts(feature_filters: Tensor, time_filters: Tensor, bias: Tensor) -> Result<Self> {
        let (n, _) = feature_filters.matrix_dims("svdf")?;
        let (n2, _) = time_filters.matrix_dims("svdf")?;
        if n != n2 || bias.shape() != [n] {
            return Err(KwsError::dim("svdf", feature_filters.shape(), time_filters.shape()));
        }
        Ok(Self {
            feature_filters,
            time_filters,
            bias,
        })
    }

    pub fn nodes(&self) -> usize {
        self.feature_filters.shape()[0]
    }

    pub fn input_dim(&self) -> usize {
        self.feature_filters.shape()[1]
    }

    pub fn memory(&self) -> usize {
        self.time_filters.shape()[1]
    }

    /// `N·D + N·T + N`
    pub fn param_count(&self) -> usize {
        let n = self.nodes();
        n * self.input_dim() + n * self.memory() + n
    }

    pub fn new_state(&self) -> SvdfState {
        SvdfState::new(self.memory(), self.nodes())
    }

    /// Whole-sequence forward over `x: [frames × input_dim]`.
    pub fn forward_batch(&self, x: &Tensor) -> Result<Tensor> {
        let (frames, dim) = x.matrix_dims("svdf_forward_batch")?;
        if dim != self.input_dim() {
            return Err(KwsError::dim("svdf_forward_batch", x.shape(), self.feature_filters.shape()));
        }
        let activations = x.matmul_t(&self.feature_filters)?;
        let (nodes, memory) = (self.nodes(), self.memory());
        let mut out = vec![0.0; frames * nodes];
        for f in 0..frames {
            for n in 0..nodes {
                let mut acc = 0.0;
                for t in 0..memory {
                    let src = f as isize - memory as isize + 1 + t as isize;
                    if src >= 0 {
                        acc += self.time_filters.get2(n, t) * activations.get2(src as usize, n);
                    }
                }
                out[f * nodes + n] = (acc + self.bias.data()[n]).max(0.0);
            }
        }
        Tensor::new(vec![frames, nodes], out)
    }

    /// Advances `state` by one frame and returns this frame's output.
    pub fn forward_stream(&self, state: &mut SvdfState, frame: &[f64]) -> Result<Vec<f64>> {
        if state.memory != self.memory() || state.nodes != self.nodes() {
            return Err(KwsError::dim(
                "svdf_forward_stream",
                &[state.memory, state.nodes],
                &[self.memory(), self.nodes()],
            ));
        }
        if frame.len() != self.input_dim() {
            return Err(KwsError::dim("svdf_forward_stream", &[frame.len()], &[self.input_dim()]));
        }
        let (nodes, memory) = (self.nodes(), self.memory());
        let cursor = state.cursor;
        for n in 0..nodes {
            let filt = self.feature_filters.row(n);
            state.buffer[cursor * nodes + n] = filt.iter().zip(frame).map(|(w, x)| w * x).sum();
        }
        let mut out = vec![0.0; nodes];
        for (n, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for t in 0..memory {
                let back = memory - 1 - t;
                let slot = (cursor + memory - back) % memory;
                acc += self.time_filters.get2(n, t) * state.buffer[slot * nodes + n];
            }
            *o = (acc + self.bias.data()[n]).max(0.0);
        }
        state.cursor = (cursor + 1) % memory;
        state.frames_seen += 1;
        Ok(out)
    }

    pub fn bind(&self, tape: &mut Tape) -> SvdfVars {
        SvdfVars {
            feature_filters: tape.leaf(self.feature_filters.clone()),
            time_filters: tape.leaf(self.time_filters.clone()),
            bias: tape.leaf(self.bias.clone()),
        }
    }

    pub(crate) fn tensors(&self) -> [(&'static str, &Tensor); 3] {
        [
            ("feature_filters", &self.feature_filters),
            ("time_filters", &self.time_filters),
            ("bias", &self.bias),
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut Tensor; 3] {
        [&mut self.feature_filters, &mut self.time_filters, &mut self.bias]
    }
}

impl SvdfVars {
    /// Records the layer on `tape` for input `x: [frames × input_dim]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let activations = tape.matmul_t(x, self.feature_filters)?;
        let filtered = tape.time_filter(activations, self.time_filters)?;
        let biased = tape.add(filtered, self.bias)?;
        Ok(tape.relu(biased))
    }
}

/// Ring buffer of the last `memory` feature-filter activations of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdfState {
    memory: usize,
    nodes: usize,
    buffer: Vec<f64>,
    cursor: usize,
    frames_seen: u64,
}

impl SvdfState {
    pub fn new(memory: usize, nodes: usize) -> Self {
        Self {
            memory,
            nodes,
            buffer: vec![0.0; memory * nodes],
            cursor: 0,
            frames_seen: 0,
        }
    }

    pub fn reset(&mut self) {
        self.buffer.iter_mut().for_each(|v| *v = 0.0);
        self.cursor = 0;
        self.frames_seen = 0;
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn frames_seen(&self) -> u64 {
        self.frames_seen
    }
}
