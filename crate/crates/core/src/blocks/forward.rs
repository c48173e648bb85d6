use super::operator::{unified_terms, unified_terms_backward};
use super::{BlockConfig, BlockParams, BnCache, BnMode, Variant};
use crate::affinity::{
    criss_cross_mask, kernel_backward, kernel_from_logits, normalize_rw_backward, normalize_sym_backward,
    rw_with_degrees, sym_with_parts, AffinityMatrix, CrissCrossMask, Kernel, LogitShift, NormTag, SymNormParts,
};
use crate::error::{Error, Result};
use crate::tensor::{
    matmul, matmul_nt, matmul_tn, softmax_cols, softmax_cols_backward, softmax_rows, softmax_rows_backward,
    DenseArray,
};

#[derive(Debug, Clone)]
enum AffinityState {
    RandomWalk { m: DenseArray, degrees: Vec<f64> },
    /// `m` is already multiplied by the mask.
    Masked { m: DenseArray, degrees: Vec<f64> },
    Symmetric { m: DenseArray, parts: SymNormParts },
    Product { p: DenseArray, q: DenseArray },
}

/// Everything the pre-normalization branch `F` of one sample needs for backward.
#[derive(Debug, Clone)]
pub struct BranchCache {
    x: DenseArray,
    phi: DenseArray,
    psi: DenseArray,
    state: AffinityState,
    powers: Vec<DenseArray>,
    /// CGNL aggregate reshaped back to `(N, C_s)`.
    unvec: Option<DenseArray>,
    pub attention: AffinityMatrix,
    pub f: DenseArray,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    pub branches: Vec<BranchCache>,
    pub bn: BnCache,
}

#[derive(Debug, Clone)]
pub struct BlockOutput {
    pub y: DenseArray,
    pub attention: AffinityMatrix,
}

/// Parameter gradients, laid out like [`BlockParams::tensors_mut`].
#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrads {
    pub w_phi: DenseArray,
    pub w_psi: DenseArray,
    pub w_g: Option<DenseArray>,
    pub w_out: Vec<DenseArray>,
    pub gamma: DenseArray,
    pub beta: DenseArray,
}

impl BlockGrads {
    pub fn zeros(params: &BlockParams) -> Self {
        let z = |a: &DenseArray| DenseArray::zeros(a.shape());
        Self {
            w_phi: z(&params.w_phi),
            w_psi: z(&params.w_psi),
            w_g: params.w_g.as_ref().map(z),
            w_out: params.w_out.iter().map(z).collect(),
            gamma: z(&params.bn.gamma),
            beta: z(&params.bn.beta),
        }
    }

    pub fn tensors(&self) -> Vec<&DenseArray> {
        let mut v = vec![&self.w_phi, &self.w_psi];
        v.extend(self.w_g.as_ref());
        v.extend(self.w_out.iter());
        v.push(&self.gamma);
        v.push(&self.beta);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut DenseArray> {
        let mut v = vec![&mut self.w_phi, &mut self.w_psi];
        v.extend(self.w_g.as_mut());
        v.extend(self.w_out.iter_mut());
        v.push(&mut self.gamma);
        v.push(&mut self.beta);
        v
    }

    pub fn accumulate(&mut self, other: &Self) -> Result<()> {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b)?;
        }
        Ok(())
    }
}

/// A nonlocal-based block `Y = X + BN(F(A, Z))` on `(N, C₁)` feature maps.
#[derive(Debug, Clone)]
pub struct Block {
    pub cfg: BlockConfig,
    pub params: BlockParams,
    mask: Option<CrissCrossMask>,
}

fn shape_err(op: &'static str, got: &DenseArray, want: &[usize]) -> Error {
    Error::Shape {
        op,
        left: got.shape().to_vec(),
        right: want.to_vec(),
    }
}

impl Block {
    pub fn new(cfg: BlockConfig, params: BlockParams) -> Result<Self> {
        cfg.validate()?;
        let emb = [cfg.c1, cfg.cs];
        for w in [Some(&params.w_phi), Some(&params.w_psi), params.w_g.as_ref()].into_iter().flatten() {
            if w.shape() != emb {
                return Err(shape_err("block embedding", w, &emb));
            }
        }
        if params.w_g.is_some() != cfg.has_value_embedding() {
            return Err(Error::Config(format!("{} value embedding presence mismatch", cfg.variant)));
        }
        if params.w_out.len() != cfg.out_count() {
            return Err(Error::Config(format!(
                "{} expects {} output matrices, got {}",
                cfg.variant,
                cfg.out_count(),
                params.w_out.len()
            )));
        }
        let out = cfg.out_shape();
        if let Some(w) = params.w_out.iter().find(|w| w.shape() != out) {
            return Err(shape_err("block output", w, &out));
        }
        if params.bn.channels() != cfg.c1 {
            return Err(shape_err("block batch norm", &params.bn.gamma, &[cfg.c1]));
        }
        let mask = match cfg.spatial {
            Some((h, w)) if cfg.variant == Variant::Cc => Some(criss_cross_mask(h, w)?),
            _ => None,
        };
        Ok(Self { cfg, params, mask })
    }

    pub fn init(cfg: BlockConfig, rng: &mut impl rand::Rng) -> Result<Self> {
        let params = BlockParams::init(&cfg, rng)?;
        Self::new(cfg, params)
    }

    fn check_input(&self, x: &DenseArray) -> Result<()> {
        if x.rank() != 2 || x.cols() != self.cfg.c1 || x.rows() == 0 {
            return Err(shape_err("block input", x, &[x.rows(), self.cfg.c1]));
        }
        if let Some(mask) = &self.mask {
            if x.rows() != mask.h * mask.w {
                return Err(shape_err("block input", x, &[mask.h * mask.w, self.cfg.c1]));
            }
        }
        Ok(())
    }

    /// Weights of the polynomial terms; `None` marks a structural zero.
    fn term_weights(&self) -> Vec<Option<DenseArray>> {
        let w = &self.params.w_out;
        match self.cfg.variant {
            Variant::Snl => w.iter().cloned().map(Some).collect(),
            Variant::Ns => vec![Some(w[0].scale(-1.0)), Some(w[0].clone())],
            Variant::Nl | Variant::A2 | Variant::Cc => vec![None, Some(w[0].clone())],
            Variant::Cgnl => vec![None, Some(DenseArray::full(&[1, 1], 1.0))],
        }
    }

    fn masked_kernel(&self, logits: &DenseArray, mask: &CrissCrossMask) -> DenseArray {
        let mut m = logits.clone();
        let exponential = self.cfg.kernel.is_exponential();
        for i in 0..m.rows() {
            let keep = mask.c.row(i);
            let c = logits
                .row(i)
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k != 0.0)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            for (v, &k) in m.row_mut(i).iter_mut().zip(keep) {
                *v = match (k != 0.0, exponential) {
                    (false, _) => 0.0,
                    (true, true) => (*v - c).exp(),
                    (true, false) => *v,
                };
            }
        }
        m
    }

    fn affinity(&self, phi: &DenseArray, psi: &DenseArray) -> Result<(AffinityMatrix, AffinityState)> {
        let kernel = self.cfg.kernel;
        let finite = |m: &DenseArray| {
            if m.is_finite() {
                Ok(())
            } else {
                Err(Error::NonFinite(format!("{} affinity", self.cfg.variant)))
            }
        };
        let (a, state, tag) = match self.cfg.variant {
            Variant::Nl | Variant::Ns | Variant::Cgnl => {
                let m = kernel_from_logits(&matmul_nt(phi, psi)?, kernel, LogitShift::PerRow);
                finite(&m)?;
                let (a, degrees) = rw_with_degrees(&m)?;
                (a, AffinityState::RandomWalk { m, degrees }, NormTag::RandomWalk)
            }
            Variant::Cc => {
                let mask = self.mask.as_ref().expect("validated CC block has a mask");
                let m = self.masked_kernel(&matmul_nt(phi, psi)?, mask);
                finite(&m)?;
                let (a, degrees) = rw_with_degrees(&m)?;
                (a, AffinityState::Masked { m, degrees }, NormTag::MaskedRandomWalk)
            }
            Variant::Snl => {
                let m = kernel_from_logits(&matmul_nt(phi, psi)?, kernel, LogitShift::Global);
                finite(&m)?;
                let (a, parts) = sym_with_parts(&m, self.cfg.allow_indefinite)?;
                (a, AffinityState::Symmetric { m, parts }, NormTag::Symmetric)
            }
            Variant::A2 => {
                let p = softmax_rows(phi);
                let q = softmax_cols(psi);
                let a = matmul_nt(&p, &q)?;
                (a, AffinityState::Product { p, q }, NormTag::SoftmaxProduct)
            }
        };
        let kernel_tag: Option<Kernel> = (self.cfg.variant != Variant::A2).then_some(kernel);
        Ok((AffinityMatrix::new(a, tag, kernel_tag), state))
    }

    /// Gradients of the embeddings fed to the affinity, given `∂L/∂A`.
    fn affinity_backward(&self, cache: &BranchCache, phi: &DenseArray, psi: &DenseArray, da: &DenseArray) -> Result<(DenseArray, DenseArray)> {
        let a = &cache.attention.m;
        let dlogits = match &cache.state {
            AffinityState::RandomWalk { m, degrees } => {
                kernel_backward(self.cfg.kernel, m, &normalize_rw_backward(a, degrees, da))
            }
            AffinityState::Masked { m, degrees } => {
                let dm = normalize_rw_backward(a, degrees, da);
                if self.cfg.kernel.is_exponential() {
                    dm.hadamard(m)?
                } else {
                    dm.hadamard(&self.mask.as_ref().unwrap().c)?
                }
            }
            AffinityState::Symmetric { m, parts } => {
                kernel_backward(self.cfg.kernel, m, &normalize_sym_backward(parts, da))
            }
            AffinityState::Product { p, q } => {
                let dp = matmul(da, q)?;
                let dq = matmul_tn(da, p)?;
                return Ok((softmax_rows_backward(p, &dp), softmax_cols_backward(q, &dq)));
            }
        };
        Ok((matmul(&dlogits, psi)?, matmul_tn(&dlogits, phi)?))
    }

    /// The pre-normalization branch `F` for one sample.
    pub fn branch(&self, x: &DenseArray) -> Result<BranchCache> {
        self.check_input(x)?;
        let p = &self.params;
        let phi = matmul(x, &p.w_phi)?;
        let psi = matmul(x, &p.w_psi)?;
        let z = match &p.w_g {
            Some(w) => matmul(x, w)?,
            None => x.clone(),
        };
        let cgnl = self.cfg.variant == Variant::Cgnl;
        let as_nodes = |t: &DenseArray| -> Result<DenseArray> {
            if cgnl {
                t.clone().reshape(&[t.len(), 1])
            } else {
                Ok(t.clone())
            }
        };
        let (phi_n, psi_n, z_n) = (as_nodes(&phi)?, as_nodes(&psi)?, as_nodes(&z)?);
        let (attention, state) = self.affinity(&phi_n, &psi_n)?;
        let weights = self.term_weights();
        let wref: Vec<_> = weights.iter().map(Option::as_ref).collect();
        let (agg, powers) = unified_terms(&attention.m, &z_n, &wref)?;
        let (f, unvec) = if cgnl {
            let o = agg.reshape(&[x.rows(), self.cfg.cs])?;
            (matmul(&o, &p.w_out[0])?, Some(o))
        } else {
            (agg, None)
        };
        Ok(BranchCache {
            x: x.clone(),
            phi: phi_n,
            psi: psi_n,
            state,
            powers,
            unvec,
            attention,
            f,
        })
    }

    /// Backward of [`Block::branch`]; the batch-norm entries of the returned
    /// gradients are zero.
    pub fn branch_backward(&self, cache: &BranchCache, df: &DenseArray) -> Result<(DenseArray, BlockGrads)> {
        let p = &self.params;
        let (n, cs) = (cache.x.rows(), self.cfg.cs);
        let mut grads = BlockGrads::zeros(p);
        let dagg = match &cache.unvec {
            Some(o) => {
                grads.w_out[0] = matmul_tn(o, df)?;
                let d_o = matmul_nt(df, &p.w_out[0])?;
                d_o.reshape(&[n * cs, 1])?
            }
            None => df.clone(),
        };
        let weights = self.term_weights();
        let wref: Vec<_> = weights.iter().map(Option::as_ref).collect();
        let ug = unified_terms_backward(&cache.attention.m, &cache.powers, &wref, &dagg)?;
        let mut dw = ug.weights;
        match self.cfg.variant {
            Variant::Snl => grads.w_out = dw.into_iter().map(Option::unwrap).collect(),
            Variant::Ns => {
                let mut d = dw[1].take().unwrap();
                d.axpy(-1.0, dw[0].as_ref().unwrap())?;
                grads.w_out[0] = d;
            }
            Variant::Nl | Variant::A2 | Variant::Cc => grads.w_out[0] = dw[1].take().unwrap(),
            Variant::Cgnl => {}
        }
        let (dphi, dpsi) = self.affinity_backward(cache, &cache.phi, &cache.psi, &ug.a)?;
        let back = |t: DenseArray| -> Result<DenseArray> {
            if cache.unvec.is_some() {
                t.reshape(&[n, cs])
            } else {
                Ok(t)
            }
        };
        let (dphi, dpsi, dz) = (back(dphi)?, back(dpsi)?, back(ug.z)?);
        grads.w_phi = matmul_tn(&cache.x, &dphi)?;
        grads.w_psi = matmul_tn(&cache.x, &dpsi)?;
        let mut dx = matmul_nt(&dphi, &p.w_phi)?;
        dx.add_assign(&matmul_nt(&dpsi, &p.w_psi)?)?;
        match &p.w_g {
            Some(w) => {
                grads.w_g = Some(matmul_tn(&cache.x, &dz)?);
                dx.add_assign(&matmul_nt(&dz, w)?)?;
            }
            None => dx.add_assign(&dz)?,
        }
        Ok((dx, grads))
    }

    /// `Y = X + BN(F)` for a batch; batch statistics pool every position of
    /// every sample.
    pub fn forward_batch(&self, xs: &[DenseArray], mode: BnMode) -> Result<(Vec<DenseArray>, BlockCache)> {
        let branches = xs.iter().map(|x| self.branch(x)).collect::<Result<Vec<_>>>()?;
        self.finish_batch(xs, branches, mode)
    }

    /// Normalization and residual for precomputed branches.
    pub fn finish_batch(
        &self,
        xs: &[DenseArray],
        branches: Vec<BranchCache>,
        mode: BnMode,
    ) -> Result<(Vec<DenseArray>, BlockCache)> {
        let fs: Vec<&DenseArray> = branches.iter().map(|b| &b.f).collect();
        let (normed, bn) = self.params.bn.forward(&fs, mode);
        let ys = xs
            .iter()
            .zip(normed)
            .map(|(x, b)| x.add(&b))
            .collect::<Result<Vec<_>>>()?;
        Ok((ys, BlockCache { branches, bn }))
    }

    /// Input gradients per sample and parameter gradients summed over the batch.
    pub fn backward_batch(&self, cache: &BlockCache, dys: &[DenseArray]) -> Result<(Vec<DenseArray>, BlockGrads)> {
        let (dfs, dgamma, dbeta) = self.bn_backward(cache, dys);
        let per_sample = cache
            .branches
            .iter()
            .zip(&dfs)
            .map(|(b, df)| self.branch_backward(b, df))
            .collect::<Result<Vec<_>>>()?;
        self.collect_grads(per_sample, dys, dgamma, dbeta)
    }

    /// Batch-norm part of [`Block::backward_batch`]: `(∂L/∂F per sample, dγ, dβ)`.
    pub fn bn_backward(&self, cache: &BlockCache, dys: &[DenseArray]) -> (Vec<DenseArray>, DenseArray, DenseArray) {
        let refs: Vec<&DenseArray> = dys.iter().collect();
        self.params.bn.backward(&cache.bn, &refs)
    }

    /// Adds the residual path and sums parameter gradients in sample order.
    pub fn collect_grads(
        &self,
        per_sample: Vec<(DenseArray, BlockGrads)>,
        dys: &[DenseArray],
        dgamma: DenseArray,
        dbeta: DenseArray,
    ) -> Result<(Vec<DenseArray>, BlockGrads)> {
        let mut total = BlockGrads::zeros(&self.params);
        let mut dxs = Vec::with_capacity(dys.len());
        for ((mut dx, g), dy) in per_sample.into_iter().zip(dys) {
            dx.add_assign(dy)?;
            total.accumulate(&g)?;
            dxs.push(dx);
        }
        total.gamma = dgamma;
        total.beta = dbeta;
        Ok((dxs, total))
    }

    /// Single-sample forward.
    pub fn forward(&self, x: &DenseArray, mode: BnMode) -> Result<BlockOutput> {
        let (mut ys, mut cache) = self.forward_batch(std::slice::from_ref(x), mode)?;
        Ok(BlockOutput {
            y: ys.pop().unwrap(),
            attention: cache.branches.pop().unwrap().attention,
        })
    }

    /// `X + F` without normalization.
    pub fn forward_unnormalized(&self, x: &DenseArray) -> Result<DenseArray> {
        x.add(&self.branch(x)?.f)
    }
}

/// `Y = X + BN(Z W₁ + A Z W₂ + …)` with the symmetric affinity.
pub fn forward_snl(x: &DenseArray, params: &BlockParams, cfg: &BlockConfig, mode: BnMode) -> Result<BlockOutput> {
    if cfg.variant != Variant::Snl {
        return Err(Error::Config(format!("forward_snl called with a {} configuration", cfg.variant)));
    }
    Block::new(cfg.clone(), params.clone())?.forward(x, mode)
}
