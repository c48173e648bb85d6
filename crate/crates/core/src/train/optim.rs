use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseArray;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// 1-based epochs after which the learning rate is multiplied by `decay`.
    pub milestones: Vec<usize>,
    pub decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            milestones: vec![15, 25],
            decay: 0.1,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::Config(msg.into())) };
        check(self.batch_size >= 1, "optim.batch_size must be at least 1")?;
        check(self.lr >= 0.0 && self.lr.is_finite(), "optim.lr must be finite and >= 0")?;
        check((0.0..1.0).contains(&self.momentum), "optim.momentum must be in [0, 1)")?;
        check(
            self.weight_decay >= 0.0 && self.weight_decay.is_finite(),
            "optim.weight_decay must be finite and >= 0",
        )?;
        check(self.decay > 0.0 && self.decay <= 1.0, "optim.decay must be in (0, 1]")?;
        check(
            self.milestones.windows(2).all(|w| w[0] < w[1]),
            "optim.milestones must be strictly increasing",
        )
    }

    /// Learning rate used during 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch > m).count();
        self.lr * self.decay.powi(passed as i32)
    }
}

/// `v ← μv + g + λθ; θ ← θ − lr·v`, coordinate-wise.
pub fn sgd_update(theta: &mut DenseArray, velocity: &mut DenseArray, grad: &DenseArray, lr: f64, momentum: f64, weight_decay: f64) {
    for ((t, v), g) in theta.data_mut().iter_mut().zip(velocity.data_mut()).zip(grad.data()) {
        *v = momentum * *v + g + weight_decay * *t;
        *t -= lr * *v;
    }
}

/// Momentum buffers and step counter for a list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub velocity: Vec<DenseArray>,
    pub step: u64,
    pub seed: u64,
    pub optim: OptimConfig,
}

impl TrainState {
    pub fn new(params: &[&DenseArray], optim: OptimConfig, seed: u64) -> Self {
        Self {
            velocity: params.iter().map(|p| DenseArray::zeros(p.shape())).collect(),
            step: 0,
            seed,
            optim,
        }
    }

    /// One SGD step over `params`; rejects non-finite gradients before
    /// touching any parameter.
    pub fn sgd_step(&mut self, params: Vec<&mut DenseArray>, grads: &[DenseArray], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.velocity.len() {
            return Err(Error::Config(format!(
                "sgd_step: {} parameters, {} gradients, {} buffers",
                params.len(),
                grads.len(),
                self.velocity.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter #{i} at step {}", self.step)));
        }
        for ((p, v), g) in params.into_iter().zip(&mut self.velocity).zip(grads) {
            if p.shape() != g.shape() || v.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "sgd_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            sgd_update(p, v, g, lr, self.optim.momentum, self.optim.weight_decay);
        }
        self.step += 1;
        Ok(())
    }
}
