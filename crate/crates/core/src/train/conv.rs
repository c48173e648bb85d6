//! 3×3, stride-2, pad-1 convolution with bias and ReLU on `(positions, channels)` maps.

use rand::Rng;

use crate::error::{Error, Result};
use crate::random;
use crate::tensor::{matmul, matmul_tn, DenseArray};

pub const KERNEL: usize = 3;
pub const STRIDE: usize = 2;

pub fn out_extent(n: usize) -> usize {
    (n + 2 - KERNEL) / STRIDE + 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    /// `(9·c_in, c_out)`; row `(ky·3 + kx)·c_in + ci`.
    pub weight: DenseArray,
    pub bias: DenseArray,
    pub c_in: usize,
    pub c_out: usize,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: DenseArray,
    /// Post-ReLU output; its support is the ReLU mask.
    pub out: DenseArray,
    h: usize,
    w: usize,
}

impl Conv {
    /// Weights and bias uniform in `±1/√fan_in`.
    pub fn init(c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        let fan_in = KERNEL * KERNEL * c_in;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: random::uniform(rng, &[fan_in, c_out], -bound, bound),
            bias: random::uniform(rng, &[c_out], -bound, bound),
            c_in,
            c_out,
        }
    }

    fn im2col(&self, x: &DenseArray, h: usize, w: usize) -> DenseArray {
        let (ho, wo, c) = (out_extent(h), out_extent(w), self.c_in);
        let width = KERNEL * KERNEL * c;
        let mut cols = DenseArray::zeros(&[ho * wo, width]);
        for oy in 0..ho {
            for ox in 0..wo {
                let row = cols.row_mut(oy * wo + ox);
                for ky in 0..KERNEL {
                    let iy = (oy * STRIDE + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..KERNEL {
                        let ix = (ox * STRIDE + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = (ky * KERNEL + kx) * c;
                        row[dst..dst + c].copy_from_slice(x.row(iy as usize * w + ix as usize));
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &DenseArray, h: usize, w: usize) -> DenseArray {
        let (ho, wo, c) = (out_extent(h), out_extent(w), self.c_in);
        let mut dx = DenseArray::zeros(&[h * w, c]);
        for oy in 0..ho {
            for ox in 0..wo {
                let row = dcols.row(oy * wo + ox);
                for ky in 0..KERNEL {
                    let iy = (oy * STRIDE + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..KERNEL {
                        let ix = (ox * STRIDE + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = (ky * KERNEL + kx) * c;
                        let target = dx.row_mut(iy as usize * w + ix as usize);
                        for (t, v) in target.iter_mut().zip(&row[src..src + c]) {
                            *t += v;
                        }
                    }
                }
            }
        }
        dx
    }

    /// `relu(conv(x) + b)` for an `h × w` map with `c_in` channels.
    pub fn forward(&self, x: &DenseArray, h: usize, w: usize) -> Result<ConvCache> {
        if x.rank() != 2 || x.rows() != h * w || x.cols() != self.c_in {
            return Err(Error::Shape {
                op: "conv",
                left: x.shape().to_vec(),
                right: vec![h * w, self.c_in],
            });
        }
        let cols = self.im2col(x, h, w);
        let mut out = matmul(&cols, &self.weight)?;
        let b = self.bias.data();
        for i in 0..out.rows() {
            for (v, bias) in out.row_mut(i).iter_mut().zip(b) {
                *v = (*v + bias).max(0.0);
            }
        }
        Ok(ConvCache { cols, out, h, w })
    }

    /// Returns `(dx, dW, db)` given the gradient of the post-ReLU output.
    pub fn backward(&self, cache: &ConvCache, dy: &DenseArray) -> Result<(DenseArray, DenseArray, DenseArray)> {
        let (dx, dw, db) = self.backward_with(cache, dy, Some(&self.weight.transpose()))?;
        Ok((dx.expect("input gradient requested"), dw, db))
    }

    /// [`Conv::backward`] with a precomputed `Wᵀ`, shared across a batch.
    /// Without it the input gradient is skipped.
    pub fn backward_with(
        &self,
        cache: &ConvCache,
        dy: &DenseArray,
        weight_t: Option<&DenseArray>,
    ) -> Result<(Option<DenseArray>, DenseArray, DenseArray)> {
        let mut dpre = dy.clone();
        for (g, &o) in dpre.data_mut().iter_mut().zip(cache.out.data()) {
            if o <= 0.0 {
                *g = 0.0;
            }
        }
        let dw = matmul_tn(&cache.cols, &dpre)?;
        let mut db = DenseArray::zeros(&[self.c_out]);
        for i in 0..dpre.rows() {
            for (d, g) in db.data_mut().iter_mut().zip(dpre.row(i)) {
                *d += g;
            }
        }
        let dx = match weight_t {
            Some(wt) => Some(self.col2im(&matmul(&dpre, wt)?, cache.h, cache.w)),
            None => None,
        };
        Ok((dx, dw, db))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, grad_rel_err, Step};

    #[test]
    fn output_extent() {
        assert_eq!(out_extent(8), 4);
        assert_eq!(out_extent(32), 16);
        assert_eq!(out_extent(7), 4);
        assert_eq!(out_extent(1), 1);
    }

    #[test]
    fn matches_direct_convolution() {
        let mut rng = random::rng(2);
        let conv = Conv::init(2, 3, &mut rng);
        let (h, w) = (5, 4);
        let x = random::normal(&mut rng, &[h * w, 2], 1.0);
        let out = conv.forward(&x, h, w).unwrap().out;
        for oy in 0..out_extent(h) {
            for ox in 0..out_extent(w) {
                for co in 0..3 {
                    let mut acc = conv.bias.data()[co];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (iy, ix) = ((2 * oy + ky) as isize - 1, (2 * ox + kx) as isize - 1);
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..2 {
                                acc += x.get(iy as usize * w + ix as usize, ci) * conv.weight.get((ky * 3 + kx) * 2 + ci, co);
                            }
                        }
                    }
                    assert!((out.get(oy * out_extent(w) + ox, co) - acc.max(0.0)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = random::rng(8);
        let mut conv = Conv::init(2, 3, &mut rng);
        conv.bias = random::normal(&mut rng, &[3], 0.5);
        let (h, w) = (4, 5);
        let x = random::normal(&mut rng, &[h * w, 2], 1.0);
        let r = random::normal(&mut rng, &[out_extent(h) * out_extent(w), 3], 1.0);
        let cache = conv.forward(&x, h, w).unwrap();
        let (dx, dw, db) = conv.backward(&cache, &r).unwrap();
        let obj = |c: &Conv, x: &DenseArray| c.forward(x, h, w).unwrap().out.hadamard(&r).unwrap().sum();
        let fd_x = finite_diff_grad(|p| obj(&conv, p), &x, Step::Fixed(1e-6)).unwrap();
        assert!(grad_rel_err(&dx, &fd_x, 1e-8) < 1e-6);
        let fd_w = finite_diff_grad(
            |p| {
                let mut c = conv.clone();
                c.weight = p.clone();
                obj(&c, &x)
            },
            &conv.weight,
            Step::Fixed(1e-6),
        )
        .unwrap();
        assert!(grad_rel_err(&dw, &fd_w, 1e-8) < 1e-6);
        let fd_b = finite_diff_grad(
            |p| {
                let mut c = conv.clone();
                c.bias = p.clone();
                obj(&c, &x)
            },
            &conv.bias,
            Step::Fixed(1e-6),
        )
        .unwrap();
        assert!(grad_rel_err(&db, &fd_b, 1e-8) < 1e-6);
    }
}
