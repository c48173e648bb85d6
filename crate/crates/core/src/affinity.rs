//! Affinity kernels, degree normalizations and the criss-cross mask.
//!
//! Every normalization that the block variants differentiate through has a
//! `*_backward` companion mapping the gradient of the normalized matrix to the
//! gradient of the raw affinity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fault::{self, Fault};
use crate::tensor::{matmul_nt, softmax_cols, softmax_rows, DenseArray};

/// Pairwise similarity `f(φ_i, ψ_j)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kernel {
    /// `φ_i · ψ_j`; may be negative.
    Dot,
    /// `exp(φ_i · ψ_j)`.
    Gaussian,
    /// `exp(φ_i · ψ_j)` on learned embeddings; its random-walk normalization
    /// is the usual attention softmax.
    EmbeddedGaussian,
}

impl Kernel {
    pub fn is_exponential(self) -> bool {
        !matches!(self, Kernel::Dot)
    }

    pub fn name(self) -> &'static str {
        match self {
            Kernel::Dot => "dot",
            Kernel::Gaussian => "gaussian",
            Kernel::EmbeddedGaussian => "embedded-gaussian",
        }
    }
}

impl std::str::FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot" => Ok(Kernel::Dot),
            "gaussian" => Ok(Kernel::Gaussian),
            "embedded-gaussian" => Ok(Kernel::EmbeddedGaussian),
            other => Err(Error::Usage(format!(
                "unknown kernel `{other}` (expected dot, gaussian or embedded-gaussian)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormTag {
    Raw,
    RandomWalk,
    Symmetric,
    MaskedRandomWalk,
    SoftmaxProduct,
}

#[derive(Debug, Clone)]
pub struct AffinityMatrix {
    pub m: DenseArray,
    pub norm: NormTag,
    /// `None` for affinities not produced by a pairwise kernel (softmax product).
    pub kernel: Option<Kernel>,
}

impl AffinityMatrix {
    pub fn new(m: DenseArray, norm: NormTag, kernel: Option<Kernel>) -> Self {
        Self { m, norm, kernel }
    }

    pub fn raw(m: DenseArray) -> Self {
        Self::new(m, NormTag::Raw, None)
    }

    pub fn n(&self) -> usize {
        self.m.rows()
    }
}

/// Constant subtracted from the kernel logits before exponentiation. Every
/// normalization applied afterwards is invariant to it, so it changes
/// neither the normalized affinity nor its gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogitShift {
    None,
    /// One constant for the whole matrix (invariance of symmetric normalization).
    Global,
    /// One constant per row (invariance of random-walk normalization).
    PerRow,
}

fn check_pair(phi: &DenseArray, psi: &DenseArray) -> Result<()> {
    if phi.rank() != 2 || phi.shape() != psi.shape() {
        return Err(Error::Shape {
            op: "compute_affinity",
            left: phi.shape().to_vec(),
            right: psi.shape().to_vec(),
        });
    }
    Ok(())
}

/// Raw affinity `M_ij = f(φ_i, ψ_j)`.
pub fn compute_affinity(phi: &DenseArray, psi: &DenseArray, kernel: Kernel) -> Result<AffinityMatrix> {
    compute_affinity_shifted(phi, psi, kernel, LogitShift::None)
}

/// Raw affinity with the exponential kernels evaluated as `exp(s_ij - c)`.
pub fn compute_affinity_shifted(
    phi: &DenseArray,
    psi: &DenseArray,
    kernel: Kernel,
    shift: LogitShift,
) -> Result<AffinityMatrix> {
    check_pair(phi, psi)?;
    let logits = matmul_nt(phi, psi)?;
    let m = kernel_from_logits(&logits, kernel, shift);
    if !m.is_finite() {
        return Err(Error::NonFinite(format!("{} kernel", kernel.name())));
    }
    Ok(AffinityMatrix::new(m, NormTag::Raw, Some(kernel)))
}

pub(crate) fn kernel_from_logits(logits: &DenseArray, kernel: Kernel, shift: LogitShift) -> DenseArray {
    if !kernel.is_exponential() {
        return logits.clone();
    }
    match shift {
        LogitShift::None => logits.map(f64::exp),
        LogitShift::Global => {
            let c = logits.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            logits.map(|v| (v - c).exp())
        }
        LogitShift::PerRow => {
            let mut m = logits.clone();
            for i in 0..m.rows() {
                let row = m.row_mut(i);
                let c = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                row.iter_mut().for_each(|v| *v = (*v - c).exp());
            }
            m
        }
    }
}

/// Gradient of the logits given the kernel output `m` and its gradient `g`.
pub fn kernel_backward(kernel: Kernel, m: &DenseArray, g: &DenseArray) -> DenseArray {
    if kernel.is_exponential() {
        g.hadamard(m).expect("kernel_backward: matching shapes")
    } else {
        g.clone()
    }
}

fn strictly_positive_degrees(m: &DenseArray) -> Result<Vec<f64>> {
    let d = m.row_sums();
    for (node, &degree) in d.iter().enumerate() {
        if !(degree > 0.0) {
            return Err(Error::IsolatedNode { node, degree });
        }
    }
    Ok(d)
}

/// Diagonal degree matrix `D_ii = Σ_j m_ij`.
pub fn degree_matrix(m: &AffinityMatrix) -> Result<DenseArray> {
    Ok(DenseArray::diag(&strictly_positive_degrees(&m.m)?))
}

/// `A = D⁻¹ M`.
pub fn normalize_rw(m: &AffinityMatrix) -> Result<AffinityMatrix> {
    let (a, _) = rw_with_degrees(&m.m)?;
    Ok(AffinityMatrix::new(a, NormTag::RandomWalk, m.kernel))
}

pub(crate) fn rw_with_degrees(m: &DenseArray) -> Result<(DenseArray, Vec<f64>)> {
    let d = strictly_positive_degrees(m)?;
    let mut a = m.clone();
    for (i, di) in d.iter().enumerate() {
        a.row_mut(i).iter_mut().for_each(|v| *v /= di);
    }
    Ok((a, d))
}

/// Backward of `A = D⁻¹ M` given `A`, the degrees and `g = ∂L/∂A`:
/// `∂L/∂M_ij = (g_ij - Σ_k g_ik A_ik) / d_i`.
pub fn normalize_rw_backward(a: &DenseArray, degrees: &[f64], g: &DenseArray) -> DenseArray {
    let mut dm = DenseArray::zeros(a.shape());
    for (i, di) in degrees.iter().enumerate() {
        let (arow, grow) = (a.row(i), g.row(i));
        let dot: f64 = arow.iter().zip(grow).map(|(x, y)| x * y).sum();
        for (d, &gv) in dm.row_mut(i).iter_mut().zip(grow) {
            *d = (gv - dot) / di;
        }
    }
    dm
}

/// Intermediate values of the symmetric normalization kept for backward.
#[derive(Debug, Clone)]
pub struct SymNormParts {
    pub m_hat: DenseArray,
    pub degrees: Vec<f64>,
}

/// `A = D̂^{-1/2} M̂ D̂^{-1/2}` with `M̂ = (M + Mᵀ)/2`.
///
/// Negative entries of `M̂` are rejected unless `allow_indefinite` is set;
/// with it the output is still symmetric but its spectrum is no longer
/// confined to `[-1, 1]`.
pub fn normalize_sym(m: &AffinityMatrix, allow_indefinite: bool) -> Result<AffinityMatrix> {
    let (a, _) = sym_with_parts(&m.m, allow_indefinite)?;
    Ok(AffinityMatrix::new(a, NormTag::Symmetric, m.kernel))
}

pub(crate) fn sym_with_parts(m: &DenseArray, allow_indefinite: bool) -> Result<(DenseArray, SymNormParts)> {
    if !m.is_square() {
        return Err(Error::Shape {
            op: "normalize_sym",
            left: m.shape().to_vec(),
            right: m.shape().to_vec(),
        });
    }
    let n = m.rows();
    let md = m.data();
    let mut hat = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let v = 0.5 * (md[i * n + j] + md[j * n + i]);
            if v < 0.0 && !allow_indefinite {
                return Err(Error::NegativeAffinity { row: i, col: j, value: v });
            }
            hat[i * n + j] = v;
        }
    }
    let m_hat = DenseArray::matrix(n, n, hat)?;
    let degrees = strictly_positive_degrees(&m_hat)?;
    let mut a = m_hat.clone();
    let faulty = fault::active(Fault::NormalizeSymSign);
    for (row, &di) in a.data_mut().chunks_mut(n.max(1)).zip(&degrees) {
        for (v, &dj) in row.iter_mut().zip(&degrees) {
            if faulty {
                *v *= (dj / di).sqrt();
            } else {
                *v /= (di * dj).sqrt();
            }
        }
    }
    Ok((a, SymNormParts { m_hat, degrees }))
}

/// Backward of the symmetric normalization, from `g = ∂L/∂A` to `∂L/∂M`.
pub fn normalize_sym_backward(parts: &SymNormParts, g: &DenseArray) -> DenseArray {
    let m_hat = &parts.m_hat;
    let n = m_hat.rows();
    let s: Vec<f64> = parts.degrees.iter().map(|d| 1.0 / d.sqrt()).collect();
    let (gd, gt, hd) = (g.data(), g.transpose(), m_hat.data());
    let gtd = gt.data();
    // ∂L/∂d_i through s_i = d_i^{-1/2}
    let dd: Vec<f64> = (0..n)
        .map(|i| {
            let r = i * n..(i + 1) * n;
            let ds: f64 = gd[r.clone()]
                .iter()
                .zip(&gtd[r.clone()])
                .zip(&hd[r])
                .zip(&s)
                .map(|(((a, b), h), sj)| (a + b) * h * sj)
                .sum();
            -0.5 * ds * s[i] / parts.degrees[i]
        })
        .collect();
    let mut dm_hat = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            dm_hat[i * n + j] = gd[i * n + j] * s[i] * s[j] + dd[i];
        }
    }
    let mut dm = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            dm[i * n + j] = 0.5 * (dm_hat[i * n + j] + dm_hat[j * n + i]);
        }
    }
    DenseArray::matrix(n, n, dm).expect("square gradient")
}

/// Binary mask keeping only pairs of positions that share a row or a column
/// of an `h × w` grid. Positions are numbered row-major.
#[derive(Debug, Clone)]
pub struct CrissCrossMask {
    pub h: usize,
    pub w: usize,
    pub c: DenseArray,
}

pub fn criss_cross_mask(h: usize, w: usize) -> Result<CrissCrossMask> {
    if h == 0 || w == 0 {
        return Err(Error::Usage(format!("criss-cross mask needs h, w >= 1 (got {h}x{w})")));
    }
    let n = h * w;
    let mut c = DenseArray::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            if i / w == j / w || i % w == j % w {
                c.set(i, j, 1.0);
            }
        }
    }
    Ok(CrissCrossMask { h, w, c })
}

/// `D⁻¹_{C⊙M} (C ⊙ M)`.
pub fn normalize_masked_rw(m: &AffinityMatrix, mask: &CrissCrossMask) -> Result<AffinityMatrix> {
    let masked = m.m.hadamard(&mask.c)?;
    let (a, _) = rw_with_degrees(&masked)?;
    Ok(AffinityMatrix::new(a, NormTag::MaskedRandomWalk, m.kernel))
}

/// `σ_row(Φ) · σ_col(Ψ)ᵀ`: channel softmax per position on the left factor,
/// position softmax per channel on the right. The product is row-stochastic.
pub fn softmax_product(phi: &DenseArray, psi: &DenseArray) -> Result<AffinityMatrix> {
    check_pair(phi, psi)?;
    let p = softmax_rows(phi);
    let q = softmax_cols(psi);
    Ok(AffinityMatrix::new(matmul_nt(&p, &q)?, NormTag::SoftmaxProduct, None))
}
