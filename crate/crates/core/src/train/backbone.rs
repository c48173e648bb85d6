use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::conv::{out_extent, Conv, ConvCache};
use crate::affinity::{AffinityMatrix, Kernel};
use crate::blocks::{Block, BlockCache, BlockConfig, BnMode, Variant};
use crate::error::{Error, Result};
use crate::io::checkpoint::Checkpoint;
use crate::random;
use crate::tensor::{matmul, matmul_nt, matmul_tn, DenseArray};

pub const WIDTHS: [usize; 3] = [16, 32, 64];
const ARCH_VERSION: f64 = 1.0;

/// Block settings; `c1` and the spatial extent follow from the insertion stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub variant: Variant,
    pub cs: usize,
    pub kernel: Kernel,
    pub order: usize,
    pub allow_indefinite: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Stage after which the block sits, in `1..=3`.
    pub stage: usize,
    pub block: Option<BlockSpec>,
}

impl BackboneConfig {
    /// Spatial extent after each stage.
    pub fn extents(&self) -> [(usize, usize); 3] {
        let mut hw = (self.height, self.width);
        [0, 1, 2].map(|_| {
            hw = (out_extent(hw.0), out_extent(hw.1));
            hw
        })
    }

    pub fn block_config(&self) -> Option<BlockConfig> {
        self.block.as_ref().map(|b| {
            let (h, w) = self.extents()[self.stage - 1];
            let mut cfg = BlockConfig::new(b.variant, WIDTHS[self.stage - 1], b.cs)
                .with_kernel(b.kernel)
                .with_order(b.order)
                .with_spatial(h, w);
            cfg.allow_indefinite = b.allow_indefinite;
            cfg
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.stage) {
            return Err(Error::Config(format!("stage must be 1, 2 or 3 (got {})", self.stage)));
        }
        if self.height == 0 || self.width == 0 || self.classes < 2 {
            return Err(Error::Config("input must be non-empty with at least 2 classes".into()));
        }
        if let Some(cfg) = self.block_config() {
            cfg.validate()?;
        }
        Ok(())
    }

    fn arch_vector(&self) -> Vec<f64> {
        let (variant, cs, kernel, order, indef) = match &self.block {
            None => (-1.0, 0.0, 0.0, 0.0, 0.0),
            Some(b) => (
                b.variant.code() as f64,
                b.cs as f64,
                match b.kernel {
                    Kernel::Dot => 0.0,
                    Kernel::Gaussian => 1.0,
                    Kernel::EmbeddedGaussian => 2.0,
                },
                b.order as f64,
                if b.allow_indefinite { 1.0 } else { 0.0 },
            ),
        };
        vec![
            ARCH_VERSION,
            self.height as f64,
            self.width as f64,
            self.classes as f64,
            self.stage as f64,
            variant,
            cs,
            kernel,
            order,
            indef,
        ]
    }

    fn from_arch_vector(v: &[f64]) -> Result<Self> {
        let bad = || Error::Checkpoint("malformed meta.arch entry".into());
        if v.len() != 10 || v[0] != ARCH_VERSION || v.iter().any(|x| x.fract() != 0.0 || *x < -1.0) {
            return Err(bad());
        }
        let u = |i: usize| v[i] as usize;
        let block = if v[5] < 0.0 {
            None
        } else {
            Some(BlockSpec {
                variant: Variant::from_code(v[5] as u8).ok_or_else(bad)?,
                cs: u(6),
                kernel: [Kernel::Dot, Kernel::Gaussian, Kernel::EmbeddedGaussian]
                    .get(u(7))
                    .copied()
                    .ok_or_else(bad)?,
                order: u(8),
                allow_indefinite: v[9] != 0.0,
            })
        };
        let cfg = Self {
            height: u(1),
            width: u(2),
            classes: u(3),
            stage: u(4),
            block,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Three stride-2 conv stages, an optional nonlocal-based block after one of
/// them, global average pooling and a linear classifier.
#[derive(Debug, Clone)]
pub struct TinyBackbone {
    pub cfg: BackboneConfig,
    pub convs: Vec<Conv>,
    pub block: Option<Block>,
    pub head_w: DenseArray,
    pub head_b: DenseArray,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    convs: Vec<Vec<ConvCache>>,
    block: Option<BlockCache>,
    pooled: DenseArray,
    pub logits: DenseArray,
}

fn map_samples<T, F>(n: usize, parallel: bool, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    if parallel {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

impl TinyBackbone {
    pub fn init(cfg: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut c_in = 1;
        let convs = WIDTHS
            .iter()
            .map(|&c| {
                let conv = Conv::init(c_in, c, rng);
                c_in = c;
                conv
            })
            .collect();
        let block = cfg.block_config().map(|b| Block::init(b, rng)).transpose()?;
        // small head so the first predictions are close to uniform
        let head_w = random::normal(rng, &[WIDTHS[2], cfg.classes], 0.01);
        let head_b = DenseArray::zeros(&[cfg.classes]);
        Ok(Self {
            cfg,
            convs,
            block,
            head_w,
            head_b,
        })
    }

    /// Learnable tensors with stable names, in gradient order.
    pub fn params(&self) -> Vec<(String, &DenseArray)> {
        let mut v = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            v.push((format!("conv{}.weight", i + 1), &c.weight));
            v.push((format!("conv{}.bias", i + 1), &c.bias));
        }
        if let Some(b) = &self.block {
            v.extend(b.params.named().into_iter().map(|(n, t)| (format!("block.{n}"), t)));
        }
        v.push(("head.weight".into(), &self.head_w));
        v.push(("head.bias".into(), &self.head_b));
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut DenseArray> {
        let mut v = Vec::new();
        for c in &mut self.convs {
            v.push(&mut c.weight);
            v.push(&mut c.bias);
        }
        if let Some(b) = &mut self.block {
            v.extend(b.params.tensors_mut());
        }
        v.push(&mut self.head_w);
        v.push(&mut self.head_b);
        v
    }

    pub fn forward(&self, images: &[&DenseArray], mode: BnMode, parallel: bool) -> Result<ForwardCache> {
        let ext = self.cfg.extents();
        let mut xs: Vec<DenseArray> = images.iter().map(|x| (*x).clone()).collect();
        let mut hw = (self.cfg.height, self.cfg.width);
        let mut conv_caches = Vec::with_capacity(3);
        let mut block_cache = None;
        for (s, conv) in self.convs.iter().enumerate() {
            let caches = map_samples(xs.len(), parallel, |i| conv.forward(&xs[i], hw.0, hw.1))?;
            xs = caches.iter().map(|c| c.out.clone()).collect();
            conv_caches.push(caches);
            hw = ext[s];
            if s + 1 == self.cfg.stage {
                if let Some(block) = &self.block {
                    let branches = map_samples(xs.len(), parallel, |i| block.branch(&xs[i]))?;
                    let (ys, cache) = block.finish_batch(&xs, branches, mode)?;
                    xs = ys;
                    block_cache = Some(cache);
                }
            }
        }
        let c = WIDTHS[2];
        let mut pooled = DenseArray::zeros(&[xs.len(), c]);
        for (i, x) in xs.iter().enumerate() {
            let inv = 1.0 / x.rows() as f64;
            let row = pooled.row_mut(i);
            for r in 0..x.rows() {
                for (p, v) in row.iter_mut().zip(x.row(r)) {
                    *p += v;
                }
            }
            row.iter_mut().for_each(|p| *p *= inv);
        }
        let mut logits = matmul(&pooled, &self.head_w)?;
        for i in 0..logits.rows() {
            for (z, b) in logits.row_mut(i).iter_mut().zip(self.head_b.data()) {
                *z += b;
            }
        }
        Ok(ForwardCache {
            convs: conv_caches,
            block: block_cache,
            pooled,
            logits,
        })
    }

    /// Gradients for every tensor of [`TinyBackbone::params`], in order.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &DenseArray, parallel: bool) -> Result<Vec<DenseArray>> {
        let ext = self.cfg.extents();
        let n = dlogits.rows();
        let d_head_w = matmul_tn(&cache.pooled, dlogits)?;
        let mut d_head_b = DenseArray::zeros(&[self.cfg.classes]);
        for i in 0..n {
            for (d, g) in d_head_b.data_mut().iter_mut().zip(dlogits.row(i)) {
                *d += g;
            }
        }
        let dpooled = matmul_nt(dlogits, &self.head_w)?;
        let positions = ext[2].0 * ext[2].1;
        let mut dxs: Vec<DenseArray> = (0..n)
            .map(|i| {
                let row: Vec<f64> = dpooled.row(i).iter().map(|g| g / positions as f64).collect();
                let mut d = DenseArray::zeros(&[positions, WIDTHS[2]]);
                for r in 0..positions {
                    d.row_mut(r).copy_from_slice(&row);
                }
                d
            })
            .collect();
        let mut conv_grads: Vec<(DenseArray, DenseArray)> = Vec::with_capacity(3);
        let mut block_grads = None;
        for s in (0..3).rev() {
            if s + 1 == self.cfg.stage {
                if let (Some(block), Some(bc)) = (&self.block, &cache.block) {
                    let (dfs, dgamma, dbeta) = block.bn_backward(bc, &dxs);
                    let per = map_samples(n, parallel, |i| block.branch_backward(&bc.branches[i], &dfs[i]))?;
                    let (d, g) = block.collect_grads(per, &dxs, dgamma, dbeta)?;
                    dxs = d;
                    block_grads = Some(g);
                }
            }
            let conv = &self.convs[s];
            // the input image needs no gradient
            let wt = (s > 0).then(|| conv.weight.transpose());
            let per = map_samples(n, parallel, |i| conv.backward_with(&cache.convs[s][i], &dxs[i], wt.as_ref()))?;
            let mut dw = DenseArray::zeros(conv.weight.shape());
            let mut db = DenseArray::zeros(conv.bias.shape());
            dxs = Vec::with_capacity(n);
            for (dx, w, b) in per {
                dw.add_assign(&w)?;
                db.add_assign(&b)?;
                dxs.extend(dx);
            }
            conv_grads.push((dw, db));
        }
        conv_grads.reverse();
        let mut out = Vec::new();
        for (w, b) in conv_grads {
            out.push(w);
            out.push(b);
        }
        if let Some(g) = block_grads {
            out.extend(g.tensors().into_iter().cloned());
        }
        out.push(d_head_w);
        out.push(d_head_b);
        Ok(out)
    }

    /// Folds the batch statistics of a train-mode forward into the block's
    /// running estimates.
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        if let (Some(block), Some(bc)) = (&mut self.block, &cache.block) {
            block.params.bn.update_running(&bc.bn);
        }
    }

    /// Attention matrix of the block for one image (inference mode), with the
    /// spatial extent it lives on.
    pub fn attention(&self, image: &DenseArray) -> Result<(AffinityMatrix, usize, usize)> {
        let block = self
            .block
            .as_ref()
            .ok_or_else(|| Error::Usage("model has no nonlocal block".into()))?;
        let ext = self.cfg.extents();
        let mut x = image.clone();
        let mut hw = (self.cfg.height, self.cfg.width);
        for s in 0..self.cfg.stage {
            x = self.convs[s].forward(&x, hw.0, hw.1)?.out;
            hw = ext[s];
        }
        Ok((block.branch(&x)?.attention, hw.0, hw.1))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        let arch = self.cfg.arch_vector();
        ck.push_array("meta.arch", &DenseArray::new(vec![arch.len()], arch)?)?;
        for (name, t) in self.params() {
            ck.push_array(name, t)?;
        }
        if let Some(b) = &self.block {
            ck.push_array("block.bn_running_mean", &b.params.bn.running_mean)?;
            ck.push_array("block.bn_running_var", &b.params.bn.running_var)?;
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let arch = ck.array("meta.arch")?;
        let cfg = BackboneConfig::from_arch_vector(arch.data())?;
        let mut model = Self::init(cfg, &mut random::rng(0))?;
        let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(model.params_mut()) {
            let t = ck.array(name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "entry `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        if let Some(b) = &mut model.block {
            b.params.bn.running_mean = ck.array("block.bn_running_mean")?;
            b.params.bn.running_var = ck.array("block.bn_running_var")?;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, grad_rel_err, Step};

    fn cfg(block: Option<Variant>) -> BackboneConfig {
        BackboneConfig {
            height: 6,
            width: 10,
            classes: 4,
            stage: 1,
            block: block.map(|variant| BlockSpec {
                variant,
                cs: 4,
                kernel: Kernel::EmbeddedGaussian,
                order: 2,
                allow_indefinite: false,
            }),
        }
    }

    #[test]
    fn extents_halve_per_stage() {
        let c = BackboneConfig { height: 8, width: 32, ..cfg(None) };
        assert_eq!(c.extents(), [(4, 16), (2, 8), (1, 4)]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = random::rng(4);
        for variant in [None, Some(Variant::Snl)] {
            let mut model = TinyBackbone::init(cfg(variant), &mut rng).unwrap();
            model.head_w = random::normal(&mut rng, model.head_w.shape(), 0.5);
            let imgs: Vec<_> = (0..3).map(|_| random::normal(&mut rng, &[60, 1], 1.0)).collect();
            let refs: Vec<&DenseArray> = imgs.iter().collect();
            let r = random::normal(&mut rng, &[3, 4], 1.0);
            let cache = model.forward(&refs, BnMode::Train, false).unwrap();
            let grads = model.backward(&cache, &r, false).unwrap();
            let n = grads.len();
            assert_eq!(n, model.params().len());
            for t in 0..n {
                let mut probe = model.clone();
                let base = probe.params_mut()[t].clone();
                let fd = finite_diff_grad(
                    |p| {
                        *probe.params_mut()[t] = p.clone();
                        probe.forward(&refs, BnMode::Train, false).unwrap().logits.hadamard(&r).unwrap().sum()
                    },
                    &base,
                    Step::Fixed(1e-6),
                )
                .unwrap();
                let err = grad_rel_err(&grads[t], &fd, 1e-6);
                assert!(err < 1e-5, "{variant:?} param {} err {err}", model.params()[t].0);
            }
        }
    }

    #[test]
    fn parallel_and_serial_agree_bitwise() {
        let mut rng = random::rng(6);
        let model = TinyBackbone::init(cfg(Some(Variant::Nl)), &mut rng).unwrap();
        let imgs: Vec<_> = (0..4).map(|_| random::normal(&mut rng, &[60, 1], 1.0)).collect();
        let refs: Vec<&DenseArray> = imgs.iter().collect();
        let a = model.forward(&refs, BnMode::Train, false).unwrap();
        let b = model.forward(&refs, BnMode::Train, true).unwrap();
        assert_eq!(a.logits, b.logits);
        let g = DenseArray::full(&[4, 4], 0.25);
        assert_eq!(model.backward(&a, &g, false).unwrap(), model.backward(&b, &g, true).unwrap());
    }

    #[test]
    fn checkpoint_round_trip_restores_model() {
        let mut rng = random::rng(1);
        for variant in [None, Some(Variant::Cc), Some(Variant::Snl)] {
            let model = TinyBackbone::init(cfg(variant), &mut rng).unwrap();
            let back = TinyBackbone::from_checkpoint(&model.to_checkpoint().unwrap()).unwrap();
            assert_eq!(back.cfg, model.cfg);
            assert_eq!(
                back.params().into_iter().map(|(_, t)| t.clone()).collect::<Vec<_>>(),
                model.params().into_iter().map(|(_, t)| t.clone()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn attention_lives_on_the_insertion_stage() {
        let mut rng = random::rng(3);
        let model = TinyBackbone::init(cfg(Some(Variant::Snl)), &mut rng).unwrap();
        let (a, h, w) = model.attention(&DenseArray::zeros(&[60, 1])).unwrap();
        assert_eq!((h, w), (3, 5));
        assert_eq!(a.n(), 15);
        assert!(TinyBackbone::init(cfg(None), &mut rng).unwrap().attention(&DenseArray::zeros(&[60, 1])).is_err());
    }
}
