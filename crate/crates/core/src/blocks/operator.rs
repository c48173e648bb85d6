use crate::affinity::AffinityMatrix;
use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_nt, matmul_tn, DenseArray};

#[derive(Debug, Clone)]
pub struct UnifiedGrads {
    pub a: DenseArray,
    pub z: DenseArray,
    /// `None` for terms whose weight is structurally zero.
    pub weights: Vec<Option<DenseArray>>,
}

fn check_operands(a: &DenseArray, z: &DenseArray, weights: &[Option<&DenseArray>]) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::Config("the operator needs at least one term".into()));
    }
    if !a.is_square() || a.cols() != z.rows() {
        return Err(Error::Shape {
            op: "unified_operator",
            left: a.shape().to_vec(),
            right: z.shape().to_vec(),
        });
    }
    let mut out_cols = None;
    for w in weights.iter().flatten() {
        if w.rank() != 2 || w.rows() != z.cols() || out_cols.is_some_and(|c| c != w.cols()) {
            return Err(Error::Shape {
                op: "unified_operator",
                left: z.shape().to_vec(),
                right: w.shape().to_vec(),
            });
        }
        out_cols = Some(w.cols());
    }
    if out_cols.is_none() {
        return Err(Error::Config("the operator needs at least one non-zero term".into()));
    }
    Ok(())
}

/// `Σ_k A^k Z W_{k+1}` together with the powers `A^k Z` for `k < K`.
pub(crate) fn unified_terms(
    a: &DenseArray,
    z: &DenseArray,
    weights: &[Option<&DenseArray>],
) -> Result<(DenseArray, Vec<DenseArray>)> {
    check_operands(a, z, weights)?;
    let mut powers = vec![z.clone()];
    for _ in 1..weights.len() {
        let next = matmul(a, powers.last().unwrap())?;
        powers.push(next);
    }
    let c_out = weights.iter().flatten().next().unwrap().cols();
    let mut f = DenseArray::zeros(&[z.rows(), c_out]);
    for (p, w) in powers.iter().zip(weights) {
        if let Some(w) = w {
            f.add_assign(&matmul(p, w)?)?;
        }
    }
    Ok((f, powers))
}

pub(crate) fn unified_terms_backward(
    a: &DenseArray,
    powers: &[DenseArray],
    weights: &[Option<&DenseArray>],
    g: &DenseArray,
) -> Result<UnifiedGrads> {
    let k = weights.len();
    let mut d_weights = Vec::with_capacity(k);
    let mut d_powers = Vec::with_capacity(k);
    for (p, w) in powers.iter().zip(weights) {
        match w {
            Some(w) => {
                d_weights.push(Some(matmul_tn(p, g)?));
                d_powers.push(Some(matmul_nt(g, w)?));
            }
            None => {
                d_weights.push(None);
                d_powers.push(None);
            }
        }
    }
    let mut da = DenseArray::zeros(a.shape());
    let mut acc = d_powers[k - 1].take().unwrap_or_else(|| DenseArray::zeros(powers[0].shape()));
    for j in (1..k).rev() {
        da.add_assign(&matmul_nt(&acc, &powers[j - 1])?)?;
        acc = matmul_tn(a, &acc)?;
        if let Some(dp) = &d_powers[j - 1] {
            acc.add_assign(dp)?;
        }
    }
    Ok(UnifiedGrads {
        a: da,
        z: acc,
        weights: d_weights,
    })
}

/// `F(A, Z) = Z W₁ + A Z W₂ + Σ_{k=2}^{K-1} A^k Z W_{k+1}` with `K = weights.len()`.
/// Powers of `A` are never formed; each term reuses the previous product.
pub fn unified_operator(a: &AffinityMatrix, z: &DenseArray, weights: &[DenseArray]) -> Result<DenseArray> {
    let w: Vec<_> = weights.iter().map(Some).collect();
    Ok(unified_terms(&a.m, z, &w)?.0)
}

/// Gradients of the unified operator with respect to `A`, `Z` and every weight.
pub fn unified_operator_backward(
    a: &AffinityMatrix,
    z: &DenseArray,
    weights: &[DenseArray],
    g: &DenseArray,
) -> Result<UnifiedGrads> {
    let w: Vec<_> = weights.iter().map(Some).collect();
    let (_, powers) = unified_terms(&a.m, z, &w)?;
    unified_terms_backward(&a.m, &powers, &w, g)
}
