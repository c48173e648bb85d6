//! Differentiable matrix primitives. Each forward op has a hand-derived
//! backward companion taking the upstream gradient `g` of the op's output.

use super::DenseArray;
use crate::error::{Error, Result};

/// Row-streaming product kernels. The AVX2 builds only widen the vectors;
/// multiplies and adds stay separate, so results match the portable path.
mod kernels {
    #[inline(always)]
    fn axpy(o: &mut [f64], s: f64, b: &[f64]) {
        for (o, &bv) in o.iter_mut().zip(b) {
            *o += s * bv;
        }
    }

    #[inline(always)]
    fn nn_portable(ad: &[f64], bd: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let s = ad[i * k + p];
                if s != 0.0 {
                    axpy(orow, s, &bd[p * n..(p + 1) * n]);
                }
            }
        }
    }

    #[inline(always)]
    fn tn_portable(ad: &[f64], bd: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        for p in 0..k {
            let brow = &bd[p * n..(p + 1) * n];
            for i in 0..m {
                let s = ad[p * m + i];
                if s != 0.0 {
                    axpy(&mut out[i * n..(i + 1) * n], s, brow);
                }
            }
        }
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn nn_avx2(ad: &[f64], bd: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        nn_portable(ad, bd, out, m, k, n)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn tn_avx2(ad: &[f64], bd: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        tn_portable(ad, bd, out, m, k, n)
    }

    pub fn nn(ad: &[f64], bd: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            return unsafe { nn_avx2(ad, bd, out, m, k, n) };
        }
        nn_portable(ad, bd, out, m, k, n)
    }

    pub fn tn(ad: &[f64], bd: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            return unsafe { tn_avx2(ad, bd, out, m, k, n) };
        }
        tn_portable(ad, bd, out, m, k, n)
    }
}

fn require_rank2(a: &DenseArray, op: &'static str) -> Result<()> {
    if a.rank() != 2 {
        return Err(Error::Shape {
            op,
            left: a.shape().to_vec(),
            right: vec![],
        });
    }
    Ok(())
}

/// `a · b`. Reductions run in index-ascending order, so results are
/// reproducible bit-for-bit.
pub fn matmul(a: &DenseArray, b: &DenseArray) -> Result<DenseArray> {
    require_rank2(a, "matmul")?;
    require_rank2(b, "matmul")?;
    let (m, k) = (a.rows(), a.cols());
    let n = b.cols();
    if b.rows() != k {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    kernels::nn(a.data(), b.data(), &mut out, m, k, n);
    DenseArray::matrix(m, n, out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &DenseArray, b: &DenseArray) -> Result<DenseArray> {
    require_rank2(a, "matmul_tn")?;
    require_rank2(b, "matmul_tn")?;
    let (k, m) = (a.rows(), a.cols());
    let n = b.cols();
    if b.rows() != k {
        return Err(Error::Shape {
            op: "matmul_tn",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    kernels::tn(a.data(), b.data(), &mut out, m, k, n);
    DenseArray::matrix(m, n, out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &DenseArray, b: &DenseArray) -> Result<DenseArray> {
    require_rank2(a, "matmul_nt")?;
    require_rank2(b, "matmul_nt")?;
    let (m, k) = (a.rows(), a.cols());
    let n = b.rows();
    if b.cols() != k {
        return Err(Error::Shape {
            op: "matmul_nt",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    if m == 0 || n == 0 || k == 0 {
        return Ok(DenseArray::zeros(&[m, n]));
    }
    // row-streaming product against an explicit transpose; same summation order as a dot product
    matmul(a, &b.transpose())
}

/// Backward of `c = a · b`: `da = g · bᵀ`, `db = aᵀ · g`.
pub fn matmul_backward(
    a: &DenseArray,
    b: &DenseArray,
    g: &DenseArray,
) -> Result<(DenseArray, DenseArray)> {
    Ok((matmul_nt(g, b)?, matmul_tn(a, g)?))
}

/// Row-wise softmax, stabilized by subtracting each row's maximum.
pub fn softmax_rows(m: &DenseArray) -> DenseArray {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let row = out.row_mut(i);
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Backward of `s = softmax_rows(x)` given the forward output `s`:
/// `dx_ij = s_ij (g_ij - Σ_k g_ik s_ik)`.
pub fn softmax_rows_backward(s: &DenseArray, g: &DenseArray) -> DenseArray {
    let mut dx = DenseArray::zeros(s.shape());
    for i in 0..s.rows() {
        let (srow, grow) = (s.row(i), g.row(i));
        let dot: f64 = srow.iter().zip(grow).map(|(a, b)| a * b).sum();
        for ((d, &sv), &gv) in dx.row_mut(i).iter_mut().zip(srow).zip(grow) {
            *d = sv * (gv - dot);
        }
    }
    dx
}

/// Column-wise softmax (each column sums to one).
pub fn softmax_cols(m: &DenseArray) -> DenseArray {
    softmax_rows(&m.transpose()).transpose()
}

pub fn softmax_cols_backward(s: &DenseArray, g: &DenseArray) -> DenseArray {
    softmax_rows_backward(&s.transpose(), &g.transpose()).transpose()
}
