use crate::error::{KwsError, Result};
use crate::model::OptimizerMoments;
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Number of updates applied so far.
    pub t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64, shapes: &[&[usize]]) -> Self {
        let zeros: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        Self {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Restores moments saved after `t` updates.
    pub fn restore(&mut self, moments: OptimizerMoments, t: u64) -> Result<()> {
        if moments.m.len() != self.m.len() || moments.v.len() != self.v.len() {
            return Err(KwsError::Validation(format!(
                "optimizer state holds {} tensors, model has {}",
                moments.m.len(),
                self.m.len()
            )));
        }
        for (new, old) in moments.m.iter().chain(&moments.v).zip(self.m.iter().chain(&self.v)) {
            if new.shape() != old.shape() {
                return Err(KwsError::dim("adam_restore", new.shape(), old.shape()));
            }
        }
        self.m = moments.m;
        self.v = moments.v;
        self.t = t;
        Ok(())
    }

    pub fn moments(&self) -> OptimizerMoments {
        OptimizerMoments {
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    /// One bias-corrected update of `params` (same order as at construction).
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(KwsError::dim("adam_step", &[params.len()], &[grads.len(), self.m.len()]));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.shape() != g.shape() {
                return Err(KwsError::dim("adam_step", p.shape(), g.shape()));
            }
            let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
            for (((w, &g), m), v) in it {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= self.learning_rate * (*m / c1) / ((*v / c2).sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_each_weight_by_lr() {
        let mut p = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let g = Tensor::vector(vec![3.0, -0.1, 1e-3]);
        let mut adam = Adam::new(0.01, 0.9, 0.999, 1e-8, &[&[3]]);
        adam.step(vec![&mut p], &[g]).unwrap();
        let expected = [0.99, -1.99, 0.49];
        for (a, e) in p.data().iter().zip(expected) {
            assert!((a - e).abs() < 1e-6, "{a} vs {e}");
        }
    }

    #[test]
    fn restore_rejects_wrong_shapes() {
        let mut adam = Adam::new(0.01, 0.9, 0.999, 1e-8, &[&[3]]);
        let bad = OptimizerMoments {
            m: vec![Tensor::zeros(&[2])],
            v: vec![Tensor::zeros(&[2])],
        };
        assert!(adam.restore(bad, 4).is_err());
    }
}
