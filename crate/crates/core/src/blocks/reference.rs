//! Element-wise closed forms of every variant, written independently of the
//! affinity and operator code so the two can be checked against each other.
//! All return `X + F` without batch normalization.

use super::{BlockConfig, BlockParams, Variant};
use crate::affinity::Kernel;
use crate::error::{Error, Result};
use crate::tensor::{matmul, DenseArray};

fn pair(kernel: Kernel, a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    if kernel.is_exponential() {
        dot.exp()
    } else {
        dot
    }
}

/// `O_i = Σ_j w_ij v_j / Σ_j w_ij` over the neighbours `j` admitted by `keep`.
fn weighted_mean(
    weights: impl Fn(usize, usize) -> f64,
    keep: impl Fn(usize, usize) -> bool,
    v: &DenseArray,
    center: bool,
) -> Result<DenseArray> {
    let (n, c) = (v.rows(), v.cols());
    let mut out = DenseArray::zeros(&[n, c]);
    for i in 0..n {
        let mut total = 0.0;
        for j in (0..n).filter(|&j| keep(i, j)) {
            let w = weights(i, j);
            total += w;
            for ch in 0..c {
                let delta = if center { v.get(j, ch) - v.get(i, ch) } else { v.get(j, ch) };
                out.set(i, ch, out.get(i, ch) + w * delta);
            }
        }
        if !(total > 0.0) {
            return Err(Error::IsolatedNode { node: i, degree: total });
        }
        out.row_mut(i).iter_mut().for_each(|o| *o /= total);
    }
    Ok(out)
}

fn softmax_vec(v: &[f64]) -> Vec<f64> {
    let c = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - c).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn column(m: &DenseArray, j: usize) -> Vec<f64> {
    (0..m.rows()).map(|i| m.get(i, j)).collect()
}

/// `X + F` for the configured variant, evaluated from its closed form.
pub fn forward_variant_reference(x: &DenseArray, params: &BlockParams, cfg: &BlockConfig) -> Result<DenseArray> {
    cfg.validate()?;
    let n = x.rows();
    let cs = cfg.cs;
    let kernel = cfg.kernel;
    let phi = matmul(x, &params.w_phi)?;
    let psi = matmul(x, &params.w_psi)?;
    let z = match &params.w_g {
        Some(w) => matmul(x, w)?,
        None => x.clone(),
    };
    let f_ij = |i: usize, j: usize| pair(kernel, phi.row(i), psi.row(j));
    let all = |_: usize, _: usize| true;
    let w = &params.w_out;
    let f = match cfg.variant {
        Variant::Nl => matmul(&weighted_mean(f_ij, all, &z, false)?, &w[0])?,
        Variant::Ns => matmul(&weighted_mean(f_ij, all, &z, true)?, &w[0])?,
        Variant::Cc => {
            let (_, width) = cfg.spatial.expect("validated");
            let cross = |i: usize, j: usize| i / width == j / width || i % width == j % width;
            matmul(&weighted_mean(f_ij, cross, &z, false)?, &w[0])?
        }
        Variant::A2 => {
            // gather: G = σ_col(Ψ)ᵀ Z, distribute: O = σ_row(Φ) G
            let mut gathered = DenseArray::zeros(&[cs, cs]);
            for c in 0..cs {
                let q = softmax_vec(&column(&psi, c));
                for d in 0..cs {
                    gathered.set(c, d, (0..n).map(|j| q[j] * z.get(j, d)).sum());
                }
            }
            let mut o = DenseArray::zeros(&[n, cs]);
            for i in 0..n {
                let p = softmax_vec(phi.row(i));
                for d in 0..cs {
                    o.set(i, d, (0..cs).map(|c| p[c] * gathered.get(c, d)).sum());
                }
            }
            matmul(&o, &w[0])?
        }
        Variant::Cgnl => {
            // scalar nodes p = i·C_s + c
            let nodes = n * cs;
            let (pv, sv, zv) = (phi.data(), psi.data(), z.data());
            let mut o = vec![0.0; nodes];
            for p in 0..nodes {
                let (mut num, mut den) = (0.0, 0.0);
                for q in 0..nodes {
                    let f = pair(kernel, &[pv[p]], &[sv[q]]);
                    num += f * zv[q];
                    den += f;
                }
                if !(den > 0.0) {
                    return Err(Error::IsolatedNode { node: p, degree: den });
                }
                o[p] = num / den;
            }
            matmul(&DenseArray::matrix(n, cs, o)?, &w[0])?
        }
        Variant::Snl => {
            let mut a = DenseArray::zeros(&[n, n]);
            let mut d = vec![0.0; n];
            for i in 0..n {
                for j in 0..n {
                    let v = 0.5 * (f_ij(i, j) + f_ij(j, i));
                    if v < 0.0 && !cfg.allow_indefinite {
                        return Err(Error::NegativeAffinity { row: i, col: j, value: v });
                    }
                    a.set(i, j, v);
                    d[i] += v;
                }
            }
            if let Some(i) = d.iter().position(|&v| !(v > 0.0)) {
                return Err(Error::IsolatedNode { node: i, degree: d[i] });
            }
            for i in 0..n {
                for j in 0..n {
                    a.set(i, j, a.get(i, j) / (d[i] * d[j]).sqrt());
                }
            }
            let mut term = z.clone();
            let mut f = DenseArray::zeros(&[n, cfg.c1]);
            for (k, wk) in w.iter().enumerate() {
                if k > 0 {
                    let mut next = DenseArray::zeros(term.shape());
                    for i in 0..n {
                        for ch in 0..cs {
                            next.set(i, ch, (0..n).map(|j| a.get(i, j) * term.get(j, ch)).sum());
                        }
                    }
                    term = next;
                }
                f.add_assign(&matmul(&term, wk)?)?;
            }
            f
        }
    };
    x.add(&f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::Block;
    use crate::random;

    #[test]
    fn matches_unified_instantiation_for_every_variant() {
        let mut rng = random::rng(5);
        for v in Variant::ALL {
            let cfg = BlockConfig::new(v, 5, 3).with_spatial(2, 3);
            let block = Block::init(cfg.clone(), &mut rng).unwrap();
            let x = random::normal(&mut rng, &[6, 5], 0.8);
            let reference = forward_variant_reference(&x, &block.params, &cfg).unwrap();
            let unified = block.forward_unnormalized(&x).unwrap();
            assert!(unified.rel_err(&reference) < 1e-12, "{v}: {}", unified.rel_err(&reference));
        }
    }

    #[test]
    fn ns_uniform_attention_subtracts_the_node_from_the_mean() {
        let mut rng = random::rng(9);
        let cfg = BlockConfig::new(Variant::Ns, 2, 2);
        let mut params = crate::blocks::BlockParams::init(&cfg, &mut rng).unwrap();
        params.w_phi.fill(0.0);
        params.w_g = Some(DenseArray::eye(2));
        params.w_out = vec![DenseArray::eye(2)];
        let x = DenseArray::from_rows(&[[1.0, 0.0], [3.0, 2.0]]);
        let y = forward_variant_reference(&x, &params, &cfg).unwrap();
        // mean is (2, 1): O = [[1, 1], [-1, -1]]
        assert_eq!(y, DenseArray::from_rows(&[[2.0, 1.0], [2.0, 1.0]]));
    }
}
