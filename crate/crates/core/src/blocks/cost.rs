use serde::Serialize;

use super::{BlockConfig, Variant};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    /// Embedding and output matrices.
    pub weights: u64,
    /// Batch-norm scale and shift.
    pub batch_norm: u64,
}

impl ParamCount {
    pub fn total(&self) -> u64 {
        self.weights + self.batch_norm
    }
}

pub fn count_params(cfg: &BlockConfig) -> Result<ParamCount> {
    cfg.validate()?;
    let (c1, cs) = (cfg.c1 as u64, cfg.cs as u64);
    let embeddings = if cfg.has_value_embedding() { 3 } else { 2 } * c1 * cs;
    let [r, c] = cfg.out_shape();
    let outputs = cfg.out_count() as u64 * r as u64 * c as u64;
    Ok(ParamCount {
        weights: embeddings + outputs,
        batch_norm: 2 * c1,
    })
}

/// Multiply-accumulates of one forward pass on an `h × w` map, counting every
/// matrix product: embeddings, affinity construction, aggregation and
/// output transforms. Elementwise work (kernel, normalization, batch norm,
/// residual) is not counted.
pub fn count_flops(cfg: &BlockConfig, h: usize, w: usize) -> Result<u64> {
    let cfg = cfg.clone().with_spatial(h, w);
    cfg.validate()?;
    let (c1, cs) = (cfg.c1 as u64, cfg.cs as u64);
    let n = (h * w) as u64;
    let cross = n * (h + w - 1) as u64;
    let embeddings = if cfg.has_value_embedding() { 3 } else { 2 } * n * c1 * cs;
    let (affinity, per_power) = match cfg.variant {
        Variant::Nl | Variant::Ns | Variant::Snl | Variant::A2 => (n * n * cs, n * n * cs),
        Variant::Cc => (cross * cs, cross * c1),
        Variant::Cgnl => ((n * cs).pow(2), (n * cs).pow(2)),
    };
    let powers = cfg.order as u64 - 1;
    let out_terms = match cfg.variant {
        Variant::Snl => cfg.order as u64,
        Variant::Ns => 2,
        _ => 1,
    };
    let [r, c] = cfg.out_shape();
    let outputs = out_terms * n * r as u64 * c as u64;
    Ok(embeddings + affinity + powers * per_power + outputs)
}
