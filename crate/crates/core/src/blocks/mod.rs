//! Nonlocal-based blocks as instances of the generalized operator
//! `F(A, Z) = Z W₁ + A Z W₂ + Σ_{k≥2} A^k Z W_{k+1}`.
//!
//! | variant | affinity `A`                  | node feature | terms        |
//! |---------|-------------------------------|--------------|--------------|
//! | NL      | `D⁻¹M`                        | `X W_g`      | `(0, W)`     |
//! | NS      | `D⁻¹M`                        | `X W_g`      | `(-W, W)`    |
//! | A2      | `σ_row(XW_φ) σ_col(XW_ψ)ᵀ`    | `X W_g`      | `(0, W)`     |
//! | CGNL    | `D⁻¹M` on `N·C_s` scalar nodes| `vec(X W_g)` | `(0, W)`     |
//! | CC      | `D⁻¹_{C⊙M}(C⊙M)`              | `X`          | `(0, W)`     |
//! | SNL     | `D̂^{-1/2} M̂ D̂^{-1/2}`         | `X W_g`      | `(W₁ … W_K)` |
//!
//! Every block output is `Y = X + BN(F)`; the reference forwards in
//! [`reference`] evaluate the closed forms `X + F` without normalization.

mod cost;
mod forward;
mod norm;
mod operator;
pub mod reference;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::affinity::Kernel;
use crate::error::{Error, Result};
use crate::random;
use crate::tensor::DenseArray;

pub use cost::{count_flops, count_params, ParamCount};
pub use forward::{forward_snl, Block, BlockCache, BlockGrads, BlockOutput, BranchCache};
pub use norm::{BatchNorm, BnCache, BnMode};
pub use operator::{unified_operator, unified_operator_backward, UnifiedGrads};
pub use reference::forward_variant_reference;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "NL")]
    Nl,
    #[serde(rename = "NS")]
    Ns,
    #[serde(rename = "A2")]
    A2,
    #[serde(rename = "CGNL")]
    Cgnl,
    #[serde(rename = "CC")]
    Cc,
    #[serde(rename = "SNL")]
    Snl,
}

impl Variant {
    pub const ALL: [Variant; 6] = [Variant::Nl, Variant::Ns, Variant::A2, Variant::Cgnl, Variant::Cc, Variant::Snl];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Nl => "NL",
            Variant::Ns => "NS",
            Variant::A2 => "A2",
            Variant::Cgnl => "CGNL",
            Variant::Cc => "CC",
            Variant::Snl => "SNL",
        }
    }

    pub fn code(self) -> u8 {
        Variant::ALL.iter().position(|v| *v == self).unwrap() as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Variant::ALL.get(code as usize).copied()
    }

    /// Whether the block needs the spatial grid (criss-cross mask).
    pub fn needs_spatial(self) -> bool {
        self == Variant::Cc
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Usage(format!("unknown variant `{s}` (expected NL, NS, A2, CGNL, CC or SNL)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockConfig {
    pub variant: Variant,
    /// Input channels.
    pub c1: usize,
    /// Transferred channels.
    pub cs: usize,
    pub kernel: Kernel,
    /// Number of polynomial terms `K`. Only SNL may differ from 2.
    pub order: usize,
    /// `(h, w)` of the feature map; required by CC.
    pub spatial: Option<(usize, usize)>,
    /// Accept affinities with negative entries on the symmetric path.
    pub allow_indefinite: bool,
}

impl BlockConfig {
    pub fn new(variant: Variant, c1: usize, cs: usize) -> Self {
        Self {
            variant,
            c1,
            cs,
            kernel: Kernel::EmbeddedGaussian,
            order: 2,
            spatial: None,
            allow_indefinite: false,
        }
    }

    pub fn with_spatial(mut self, h: usize, w: usize) -> Self {
        self.spatial = Some((h, w));
        self
    }

    pub fn with_kernel(mut self, kernel: Kernel) -> Self {
        self.kernel = kernel;
        self
    }

    pub fn with_order(mut self, order: usize) -> Self {
        self.order = order;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.cs == 0 {
            return Err(Error::Config("cs must be at least 1".into()));
        }
        if self.c1 < self.cs {
            return Err(Error::Config(format!("c1 ({}) must be >= cs ({})", self.c1, self.cs)));
        }
        if self.order == 0 {
            return Err(Error::Config("order must be at least 1".into()));
        }
        if self.variant != Variant::Snl && self.order != 2 {
            return Err(Error::Config(format!(
                "{} has a fixed two-term formulation; order {} is only available for SNL",
                self.variant, self.order
            )));
        }
        if self.variant.needs_spatial() && self.spatial.is_none() {
            return Err(Error::Config("CC needs the spatial extent (h, w)".into()));
        }
        if self.variant == Variant::Snl && self.kernel == Kernel::Dot && !self.allow_indefinite {
            return Err(Error::Config(
                "the dot kernel can produce negative affinities; SNL needs allow_indefinite to use it".into(),
            ));
        }
        Ok(())
    }

    /// Shape of every learnable output matrix.
    pub fn out_shape(&self) -> [usize; 2] {
        match self.variant {
            Variant::Cc => [self.c1, self.c1],
            _ => [self.cs, self.c1],
        }
    }

    /// Number of learnable output matrices.
    pub fn out_count(&self) -> usize {
        match self.variant {
            Variant::Snl => self.order,
            _ => 1,
        }
    }

    pub fn has_value_embedding(&self) -> bool {
        self.variant != Variant::Cc
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub w_phi: DenseArray,
    pub w_psi: DenseArray,
    /// Absent for CC, whose node feature is `X` itself.
    pub w_g: Option<DenseArray>,
    pub w_out: Vec<DenseArray>,
    pub bn: BatchNorm,
}

impl BlockParams {
    /// Weights uniform in `±1/√fan_in`; batch norm starts as
    /// the identity (scale 1, shift 0).
    pub fn init(cfg: &BlockConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let emb = [cfg.c1, cfg.cs];
        let out = cfg.out_shape();
        let mut draw = |shape: &[usize]| {
            let bound = 1.0 / (shape[0] as f64).sqrt();
            random::uniform(rng, shape, -bound, bound)
        };
        Ok(Self {
            w_phi: draw(&emb),
            w_psi: draw(&emb),
            w_g: cfg.has_value_embedding().then(|| draw(&emb)),
            w_out: (0..cfg.out_count()).map(|_| draw(&out)).collect(),
            bn: BatchNorm::new(cfg.c1),
        })
    }

    /// Learnable tensors in a fixed order, with stable names.
    pub fn named(&self) -> Vec<(String, &DenseArray)> {
        let mut v = vec![("w_phi".to_string(), &self.w_phi), ("w_psi".to_string(), &self.w_psi)];
        if let Some(g) = &self.w_g {
            v.push(("w_g".into(), g));
        }
        for (k, w) in self.w_out.iter().enumerate() {
            v.push((format!("w_out{}", k + 1), w));
        }
        v.push(("bn_gamma".into(), &self.bn.gamma));
        v.push(("bn_beta".into(), &self.bn.beta));
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DenseArray> {
        let mut v = vec![&mut self.w_phi, &mut self.w_psi];
        if let Some(g) = &mut self.w_g {
            v.push(g);
        }
        v.extend(self.w_out.iter_mut());
        v.push(&mut self.bn.gamma);
        v.push(&mut self.bn.beta);
        v
    }

    /// Zeroes every output matrix, turning the block into the identity.
    pub fn zero_outputs(&mut self) {
        self.w_out.iter_mut().for_each(|w| w.fill(0.0));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            assert_eq!(Variant::from_code(v.code()), Some(v));
        }
        assert!("XL".parse::<Variant>().is_err());
    }

    #[test]
    fn config_invariants() {
        assert!(BlockConfig::new(Variant::Snl, 8, 0).validate().is_err());
        assert!(BlockConfig::new(Variant::Snl, 4, 8).validate().is_err());
        assert!(BlockConfig::new(Variant::Nl, 8, 4).with_order(3).validate().is_err());
        assert!(BlockConfig::new(Variant::Snl, 8, 4).with_order(4).validate().is_ok());
        assert!(BlockConfig::new(Variant::Cc, 8, 4).validate().is_err());
        assert!(BlockConfig::new(Variant::Cc, 8, 4).with_spatial(2, 3).validate().is_ok());
        assert!(BlockConfig::new(Variant::Snl, 8, 4).with_kernel(Kernel::Dot).validate().is_err());
        let mut cfg = BlockConfig::new(Variant::Snl, 8, 4).with_kernel(Kernel::Dot);
        cfg.allow_indefinite = true;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn parameter_shapes_follow_variant() {
        let mut rng = random::rng(0);
        let snl = BlockParams::init(&BlockConfig::new(Variant::Snl, 6, 3), &mut rng).unwrap();
        assert_eq!(snl.w_out.len(), 2);
        assert_eq!(snl.w_out[0].shape(), &[3, 6]);
        let cc = BlockParams::init(&BlockConfig::new(Variant::Cc, 6, 3).with_spatial(2, 2), &mut rng).unwrap();
        assert!(cc.w_g.is_none());
        assert_eq!(cc.w_out[0].shape(), &[6, 6]);
        let names: Vec<_> = snl.named().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["w_phi", "w_psi", "w_g", "w_out1", "w_out2", "bn_gamma", "bn_beta"]);
    }
}
