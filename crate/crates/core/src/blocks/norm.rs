use crate::tensor::DenseArray;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with statistics of the current batch (all rows of all samples).
    Train,
    /// Normalize with the running statistics.
    Inference,
}

/// Per-channel batch normalization over `(positions, channels)` maps.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: DenseArray,
    pub beta: DenseArray,
    pub running_mean: DenseArray,
    pub running_var: DenseArray,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    pub mode: BnMode,
    pub xhat: Vec<DenseArray>,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    /// Biased batch variance.
    pub batch_var: Vec<f64>,
    pub count: usize,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: DenseArray::full(&[channels], 1.0),
            beta: DenseArray::zeros(&[channels]),
            running_mean: DenseArray::zeros(&[channels]),
            running_var: DenseArray::full(&[channels], 1.0),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, inputs: &[&DenseArray], mode: BnMode) -> (Vec<DenseArray>, BnCache) {
        let c = self.channels();
        let count: usize = inputs.iter().map(|x| x.rows()).sum();
        let (mean, var) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; c];
                for x in inputs {
                    for i in 0..x.rows() {
                        for (m, v) in mean.iter_mut().zip(x.row(i)) {
                            *m += v;
                        }
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                let mut var = vec![0.0; c];
                for x in inputs {
                    for i in 0..x.rows() {
                        for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                            *s += (v - m) * (v - m);
                        }
                    }
                }
                var.iter_mut().for_each(|s| *s /= count as f64);
                (mean, var)
            }
            BnMode::Inference => (self.running_mean.data().to_vec(), self.running_var.data().to_vec()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let (g, b) = (self.gamma.data(), self.beta.data());
        let mut outs = Vec::with_capacity(inputs.len());
        let mut xhats = Vec::with_capacity(inputs.len());
        for x in inputs {
            let mut xhat = (*x).clone();
            let mut y = (*x).clone();
            for i in 0..x.rows() {
                for (ch, (h, out)) in xhat.row_mut(i).iter_mut().zip(y.row_mut(i)).enumerate() {
                    *h = (*h - mean[ch]) * inv_std[ch];
                    *out = g[ch] * *h + b[ch];
                }
            }
            xhats.push(xhat);
            outs.push(y);
        }
        (
            outs,
            BnCache {
                mode,
                xhat: xhats,
                inv_std,
                batch_mean: mean,
                batch_var: var,
                count,
            },
        )
    }

    /// Returns input gradients and `(dγ, dβ)`.
    pub fn backward(&self, cache: &BnCache, grads: &[&DenseArray]) -> (Vec<DenseArray>, DenseArray, DenseArray) {
        let c = self.channels();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for (g, xhat) in grads.iter().zip(&cache.xhat) {
            for i in 0..g.rows() {
                for ch in 0..c {
                    dbeta[ch] += g.get(i, ch);
                    dgamma[ch] += g.get(i, ch) * xhat.get(i, ch);
                }
            }
        }
        let gamma = self.gamma.data();
        let m = cache.count as f64;
        let dxs = grads
            .iter()
            .zip(&cache.xhat)
            .map(|(g, xhat)| {
                let mut dx = DenseArray::zeros(g.shape());
                for i in 0..g.rows() {
                    for ch in 0..c {
                        let scale = gamma[ch] * cache.inv_std[ch];
                        let v = match cache.mode {
                            BnMode::Inference => scale * g.get(i, ch),
                            BnMode::Train => {
                                scale * (g.get(i, ch) - dbeta[ch] / m - xhat.get(i, ch) * dgamma[ch] / m)
                            }
                        };
                        dx.set(i, ch, v);
                    }
                }
                dx
            })
            .collect();
        let shape = [c];
        (
            dxs,
            DenseArray::new(shape.to_vec(), dgamma).unwrap(),
            DenseArray::new(shape.to_vec(), dbeta).unwrap(),
        )
    }

    /// Folds batch statistics into the running estimates (unbiased variance).
    pub fn update_running(&mut self, cache: &BnCache) {
        if cache.mode != BnMode::Train {
            return;
        }
        let mo = self.momentum;
        let unbias = if cache.count > 1 {
            cache.count as f64 / (cache.count - 1) as f64
        } else {
            1.0
        };
        for (r, m) in self.running_mean.data_mut().iter_mut().zip(&cache.batch_mean) {
            *r = (1.0 - mo) * *r + mo * m;
        }
        for (r, v) in self.running_var.data_mut().iter_mut().zip(&cache.batch_var) {
            *r = (1.0 - mo) * *r + mo * v * unbias;
        }
    }
}
