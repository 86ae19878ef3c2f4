//! First-order optimizers over plain `f64` tensors.

use gradvision::{Error, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    SgdMomentum { momentum: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        Self::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn sgd_momentum(momentum: f64) -> Self {
        Self::SgdMomentum { momentum }
    }
}

/// Optimizer with one state slot per parameter tensor, created on the
/// first step.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::Parameter(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Self { kind, lr, t: 0, m: Vec::new(), v: Vec::new() })
    }

    /// Updates `params` in place from `grads` (same order and shapes).
    pub fn step(&mut self, params: &mut [Tensor<f64>], grads: &[&Tensor<f64>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() || params.iter().zip(&self.m).any(|(p, m)| p.numel() != m.len()) {
            return Err(Error::Shape("parameter shapes changed between steps".into()));
        }
        self.t += 1;
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("gradient {:?} does not match parameter {:?}", g.shape(), p.shape())));
            }
            let mut data = p.data().to_vec();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            match self.kind {
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let (c1, c2) = (1.0 - beta1.powi(self.t), 1.0 - beta2.powi(self.t));
                    for i in 0..data.len() {
                        let gi = g.data()[i];
                        m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                        data[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    }
                }
                OptimizerKind::SgdMomentum { momentum } => {
                    for i in 0..data.len() {
                        m[i] = momentum * m[i] + g.data()[i];
                        data[i] -= self.lr * m[i];
                    }
                }
            }
            *p = Tensor::new(p.shape(), data)?;
        }
        Ok(())
    }
}
