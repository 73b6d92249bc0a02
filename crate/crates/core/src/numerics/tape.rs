//! Reverse-mode differentiation over a linear tape of tensor ops.

use super::tensor::{matmul_into, Tensor};
use crate::error::{KwsError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise operations accepted by [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Relu,
    Sigmoid,
    Tanh,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Scale(Var, f64),
    Sum(Var),
    TimeFilter(Var, Var),
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::TimeFilter(..) => "time_filter",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records differentiable ops in execution order.
///
/// A tape is single-threaded; build one per forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    first_non_finite: Option<(usize, &'static str)>,
}

/// Gradient buffers produced by [`Tape::backward`], one per node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Takes the gradient out, or zeros of `shape` if the var got none.
    pub fn take_or_zeros(&mut self, v: Var, shape: &[usize]) -> Tensor {
        self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

/// Broadcast is limited to a vector (`[n]` or `[1, n]`) over the last axis.
fn broadcast_ok(a: &Tensor, b: &Tensor) -> bool {
    if a.shape() == b.shape() {
        return true;
    }
    let n = a.last_dim();
    b.len() == n && (b.shape() == [n] || b.shape() == [1, n])
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row sums of an `[rows × n]` buffer, shaped like `like`.
fn reduce_rows(g: &Tensor, like: &Tensor) -> Tensor {
    let n = like.len();
    let mut out = vec![0.0; n];
    for r in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    Tensor::new(like.shape().to_vec(), out).expect("reduce shape")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// First node whose output contained NaN or infinity, with its op name.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.first_non_finite
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf => true,
            Op::Constant => false,
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::Mul(a, b)
            | Op::TimeFilter(a, b) => self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad,
            Op::Relu(a) | Op::Sigmoid(a) | Op::Tanh(a) | Op::Scale(a, _) | Op::Sum(a) => {
                self.nodes[a.0].requires_grad
            }
            Op::SoftmaxCe { logits, .. } => self.nodes[logits.0].requires_grad,
        };
        let idx = self.nodes.len();
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some((idx, op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(idx)
    }

    /// A trainable input; gradients flow into it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`, the layout used by `[out × in]` weight matrices.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(out, Op::MatMulT(a, b)))
    }

    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        match (op, b) {
            (Elementwise::Add, Some(b)) => self.add(a, b),
            (Elementwise::Mul, Some(b)) => self.mul(a, b),
            (Elementwise::Relu, None) => Ok(self.relu(a)),
            (Elementwise::Sigmoid, None) => Ok(self.sigmoid(a)),
            (Elementwise::Tanh, None) => Ok(self.tanh(a)),
            (op, _) => Err(KwsError::Usage(format!(
                "wrong operand count for elementwise {op:?}"
            ))),
        }
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if !broadcast_ok(av, bv) {
            return Err(KwsError::dim(name, av.shape(), bv.shape()));
        }
        let n = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| f(*x, bv.data()[i % n]))
            .collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.unary(a, |x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.unary(a, sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.unary(a, f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.unary(a, |x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Per-column causal filter: `out[f, n] = Σ_t w[n, t] · x[f − T + 1 + t, n]`,
    /// with rows before the start of `x` read as zero.
    pub fn time_filter(&mut self, x: Var, w: Var) -> Result<Var> {
        let (frames, nodes) = self.value(x).matrix_dims("time_filter")?;
        let (wn, memory) = self.value(w).matrix_dims("time_filter")?;
        if wn != nodes {
            return Err(KwsError::dim("time_filter", self.value(x).shape(), self.value(w).shape()));
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; frames * nodes];
        for f in 0..frames {
            for t in 0..memory {
                let src = f as isize - memory as isize + 1 + t as isize;
                if src < 0 {
                    continue;
                }
                let xrow = &xd[src as usize * nodes..(src as usize + 1) * nodes];
                let orow = &mut out[f * nodes..(f + 1) * nodes];
                for n in 0..nodes {
                    orow[n] += wd[n * memory + t] * xrow[n];
                }
            }
        }
        let out = Tensor::new(vec![frames, nodes], out)?;
        Ok(self.push(out, Op::TimeFilter(x, w)))
    }

    /// Mean over frames of `−log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (frames, classes) = lv.matrix_dims("softmax_cross_entropy")?;
        if labels.len() != frames {
            return Err(KwsError::dim("softmax_cross_entropy", lv.shape(), &[labels.len()]));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(KwsError::Validation(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let probs = softmax_rows(lv);
        let mut loss = 0.0;
        for (f, &label) in labels.iter().enumerate() {
            let row = lv.row(f);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
        }
        loss /= frames as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Backpropagates from a scalar output. Buffers start at zero; the seed
    /// gradient of `output` is one.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(KwsError::dim("backward", self.value(output).shape(), &[1]));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += d;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    // dA = G · Bᵀ
                    let da = g.matmul_t(bv).expect("matmul adjoint");
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    // dB = Aᵀ · G
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = bv.shape()[1];
                    let at = av.transpose().expect("matrix");
                    let mut db = vec![0.0; k * n];
                    matmul_into(at.data(), g.data(), &mut db, k, m, n);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], db).expect("shape"));
                }
            }
            Op::MatMulT(a, b) => {
                // out = A · Bᵀ, A [m×k], B [n×k], G [m×n]
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[0];
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_into(g.data(), bv.data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da).expect("shape"));
                }
                if self.wants(*b) {
                    let gt = g.transpose().expect("matrix");
                    let mut db = vec![0.0; n * k];
                    matmul_into(gt.data(), av.data(), &mut db, n, m, k);
                    self.accumulate(grads, *b, Tensor::new(vec![n, k], db).expect("shape"));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    let bv = self.value(*b);
                    let db = if bv.shape() == g.shape() {
                        g.clone()
                    } else {
                        reduce_rows(g, bv)
                    };
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let n = bv.len();
                if self.wants(*a) {
                    let da = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, gv)| gv * bv.data()[i % n])
                        .collect();
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da).expect("shape"));
                }
                if self.wants(*b) {
                    let prod: Vec<f64> = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    let prod = Tensor::new(av.shape().to_vec(), prod).expect("shape");
                    let db = if bv.shape() == av.shape() {
                        prod
                    } else {
                        reduce_rows(&prod, bv)
                    };
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d).expect("shape"));
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let d = g.data().iter().zip(y.data()).map(|(gv, s)| gv * s * (1.0 - s)).collect();
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), d).expect("shape"));
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let d = g.data().iter().zip(y.data()).map(|(gv, t)| gv * (1.0 - t * t)).collect();
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), d).expect("shape"));
            }
            Op::Scale(a, c) => {
                let d = g.data().iter().map(|gv| gv * c).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d).expect("shape"));
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape();
                self.accumulate(grads, *a, Tensor::filled(shape, g.data()[0]));
            }
            Op::TimeFilter(x, w) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (frames, nodes) = (xv.shape()[0], xv.shape()[1]);
                let memory = wv.shape()[1];
                let want_x = self.wants(*x);
                let want_w = self.wants(*w);
                let mut dx = vec![0.0; if want_x { frames * nodes } else { 0 }];
                let mut dw = vec![0.0; if want_w { nodes * memory } else { 0 }];
                for f in 0..frames {
                    let grow = g.row(f);
                    for t in 0..memory {
                        let src = f as isize - memory as isize + 1 + t as isize;
                        if src < 0 {
                            continue;
                        }
                        let src = src as usize;
                        for n in 0..nodes {
                            if want_x {
                                dx[src * nodes + n] += wv.data()[n * memory + t] * grow[n];
                            }
                            if want_w {
                                dw[n * memory + t] += grow[n] * xv.data()[src * nodes + n];
                            }
                        }
                    }
                }
                if want_x {
                    self.accumulate(grads, *x, Tensor::new(vec![frames, nodes], dx).expect("shape"));
                }
                if want_w {
                    self.accumulate(grads, *w, Tensor::new(vec![nodes, memory], dw).expect("shape"));
                }
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let scale = g.data()[0] / labels.len() as f64;
                let classes = probs.last_dim();
                let mut d = probs.data().to_vec();
                for (f, &label) in labels.iter().enumerate() {
                    d[f * classes + label] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                self.accumulate(grads, *logits, Tensor::new(probs.shape().to_vec(), d).expect("shape"));
            }
        }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let classes = logits.last_dim();
    let mut out = Vec::with_capacity(logits.len());
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / z));
    }
    debug_assert_eq!(out.len(), logits.rows() * classes);
    Tensor::new(logits.shape().to_vec(), out).expect("same shape")
}
