//! Graph Fourier transform, exact spectral filtering and Chebyshev filters.
//!
//! One convention is used throughout: the operator that gets eigendecomposed
//! is the symmetric normalized affinity `A` itself, and the rescaled
//! Laplacian entering the Chebyshev recursion is `L̃ = -A`. Its spectral
//! coordinates are therefore `λ̃_i = -λ_i(A)`.
//!
//! `L̃ = -A` presumes the normalized Laplacian has `λ_max = 2`, which only
//! holds exactly for bipartite graphs (in general `λ_max ≤ 2`). It is used
//! unconditionally here because it defines the implemented operator.

use crate::affinity::AffinityMatrix;
use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_tn, sym_eig, DenseArray, SpectralDecomposition, SYMMETRY_TOL};

/// Diagonal filter response `Ω = diag(ω)`, one entry per eigenpair in
/// ascending eigenvalue order of `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphFilter {
    pub omega: Vec<f64>,
}

impl GraphFilter {
    pub fn new(omega: Vec<f64>) -> Result<Self> {
        if omega.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("graph filter response".into()));
        }
        Ok(Self { omega })
    }

    /// The exact response of a Chebyshev filter: `ω_i = Σ_k θ_k T_k(-λ_i)`.
    pub fn from_chebyshev(coeffs: &ChebCoeffs, eigenvalues_of_a: &[f64]) -> Result<Self> {
        Self::new(
            eigenvalues_of_a
                .iter()
                .map(|&lam| {
                    coeffs
                        .theta
                        .iter()
                        .enumerate()
                        .map(|(k, t)| t * cheb_scalar(k, -lam))
                        .sum()
                })
                .collect(),
        )
    }
}

/// Chebyshev coefficients `θ_0 … θ_{K-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChebCoeffs {
    pub theta: Vec<f64>,
}

impl ChebCoeffs {
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        if theta.is_empty() {
            return Err(Error::Usage("Chebyshev filter needs at least one coefficient".into()));
        }
        Ok(Self { theta })
    }

    pub fn order(&self) -> usize {
        self.theta.len()
    }
}

/// Scalar Chebyshev polynomial `T_k(x)` by the three-term recurrence.
pub fn cheb_scalar(k: usize, x: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, x);
    match k {
        0 => 1.0,
        _ => {
            for _ in 1..k {
                let next = 2.0 * x * cur - prev;
                prev = cur;
                cur = next;
            }
            cur
        }
    }
}

fn require_symmetric(a: &DenseArray, op: &'static str) -> Result<()> {
    if !a.is_square() {
        return Err(Error::Shape {
            op,
            left: a.shape().to_vec(),
            right: a.shape().to_vec(),
        });
    }
    let max_dev = a.asymmetry();
    if max_dev > SYMMETRY_TOL {
        return Err(Error::Asymmetric { op, max_dev });
    }
    Ok(())
}

/// `L = D_L - A` with `(D_L)_ii = Σ_j A_ij`.
pub fn laplacian(a: &AffinityMatrix) -> Result<DenseArray> {
    require_symmetric(&a.m, "laplacian")?;
    let n = a.n();
    let deg = a.m.row_sums();
    let mut l = a.m.scale(-1.0);
    for (i, d) in deg.iter().enumerate() {
        l.set(i, i, l.get(i, i) + d);
    }
    debug_assert_eq!(l.rows(), n);
    Ok(l)
}

/// `ẑ = Uᵀ z`
pub fn graph_fourier(z: &DenseArray, u: &DenseArray) -> Result<DenseArray> {
    matmul_tn(u, z)
}

/// `z = U ẑ`
pub fn inverse_graph_fourier(zhat: &DenseArray, u: &DenseArray) -> Result<DenseArray> {
    matmul(u, zhat)
}

/// The spectral decomposition the oracle filters in.
pub fn decompose(a: &AffinityMatrix) -> Result<SpectralDecomposition> {
    require_symmetric(&a.m, "spectral decomposition")?;
    sym_eig(&a.m)
}

/// `U diag(ω) Uᵀ z` with `(Λ, U)` the eigendecomposition of `A`.
pub fn spectral_filter_direct(a: &AffinityMatrix, z: &DenseArray, g: &GraphFilter) -> Result<DenseArray> {
    let eig = decompose(a)?;
    filter_in_basis(&eig, z, g)
}

/// Spectral filtering with a precomputed decomposition.
pub fn filter_in_basis(eig: &SpectralDecomposition, z: &DenseArray, g: &GraphFilter) -> Result<DenseArray> {
    if g.omega.len() != eig.eigenvalues.len() {
        return Err(Error::Shape {
            op: "spectral_filter_direct",
            left: vec![g.omega.len()],
            right: vec![eig.eigenvalues.len()],
        });
    }
    let mut zhat = graph_fourier(z, &eig.eigenvectors)?;
    for (k, w) in g.omega.iter().enumerate() {
        zhat.row_mut(k).iter_mut().for_each(|v| *v *= w);
    }
    inverse_graph_fourier(&zhat, &eig.eigenvectors)
}

/// Materializes `T_k(L̃)`: `T_0 = I`, `T_1 = L̃`, `T_k = 2 L̃ T_{k-1} - T_{k-2}`.
pub fn cheb_recursion(ltilde: &DenseArray, k: usize) -> Result<DenseArray> {
    if !ltilde.is_square() {
        return Err(Error::Shape {
            op: "cheb_recursion",
            left: ltilde.shape().to_vec(),
            right: ltilde.shape().to_vec(),
        });
    }
    let n = ltilde.rows();
    let mut prev = DenseArray::eye(n);
    if k == 0 {
        return Ok(prev);
    }
    let mut cur = ltilde.clone();
    for _ in 1..k {
        let mut next = matmul(ltilde, &cur)?.scale(2.0);
        next.axpy(-1.0, &prev)?;
        prev = cur;
        cur = next;
    }
    Ok(cur)
}

/// `Σ_k θ_k T_k(-A) z`, via the recurrence on `n × c` feature blocks so that
/// no `T_k` (or power of `A`) is ever formed: `O(K · n² · c)`.
pub fn chebyshev_filter(a: &AffinityMatrix, z: &DenseArray, coeffs: &ChebCoeffs) -> Result<DenseArray> {
    require_symmetric(&a.m, "chebyshev_filter")?;
    let neg_a = a.m.scale(-1.0);
    let mut out = z.scale(coeffs.theta[0]);
    if coeffs.order() == 1 {
        return Ok(out);
    }
    let mut prev = z.clone();
    let mut cur = matmul(&neg_a, z)?;
    out.axpy(coeffs.theta[1], &cur)?;
    for &theta in &coeffs.theta[2..] {
        let mut next = matmul(&neg_a, &cur)?.scale(2.0);
        next.axpy(-1.0, &prev)?;
        out.axpy(theta, &next)?;
        prev = cur;
        cur = next;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affinity::{normalize_sym, NormTag};

    fn sym(m: DenseArray) -> AffinityMatrix {
        AffinityMatrix::new(m, NormTag::Symmetric, None)
    }

    fn example_a() -> AffinityMatrix {
        normalize_sym(
            &AffinityMatrix::raw(DenseArray::from_rows(&[
                [1.0, 0.4, 2.0, 0.1],
                [0.3, 2.0, 0.5, 0.7],
                [1.0, 0.2, 0.6, 1.2],
                [0.9, 0.1, 0.8, 0.3],
            ])),
            false,
        )
        .unwrap()
    }

    fn example_z() -> DenseArray {
        DenseArray::from_rows(&[[1.0, -0.5], [0.25, 2.0], [-1.5, 0.0], [0.5, 0.75]])
    }

    #[test]
    fn laplacian_examples() {
        assert_eq!(laplacian(&sym(DenseArray::eye(2))).unwrap(), DenseArray::zeros(&[2, 2]));
        let l = laplacian(&sym(DenseArray::from_rows(&[[0.0, 1.0], [1.0, 0.0]]))).unwrap();
        assert_eq!(l, DenseArray::from_rows(&[[1.0, -1.0], [-1.0, 1.0]]));
        let third = 1.0 / 3.0;
        let l = laplacian(&sym(DenseArray::from_rows(&[[third, 2.0 * third], [2.0 * third, third]]))).unwrap();
        let expected = DenseArray::from_rows(&[[2.0 * third, -2.0 * third], [-2.0 * third, 2.0 * third]]);
        assert!(l.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn laplacian_rejects_asymmetric() {
        let a = sym(DenseArray::from_rows(&[[0.0, 1.0], [0.5, 0.0]]));
        assert!(matches!(laplacian(&a), Err(Error::Asymmetric { .. })));
    }

    #[test]
    fn fourier_identity_basis_and_unit_vectors() {
        let z = example_z();
        assert_eq!(graph_fourier(&z, &DenseArray::eye(4)).unwrap(), z);
        assert_eq!(inverse_graph_fourier(&z, &DenseArray::eye(4)).unwrap(), z);

        let eig = decompose(&example_a()).unwrap();
        let mut e2 = DenseArray::zeros(&[4, 1]);
        e2.set(2, 0, 1.0);
        let col = inverse_graph_fourier(&e2, &eig.eigenvectors).unwrap();
        assert_eq!(col.data(), eig.eigenvector(2).as_slice());
    }

    #[test]
    fn fourier_round_trip_and_parseval() {
        let eig = decompose(&example_a()).unwrap();
        let z = example_z();
        let zhat = graph_fourier(&z, &eig.eigenvectors).unwrap();
        assert!((zhat.frobenius_norm() - z.frobenius_norm()).abs() < 1e-12);
        let back = inverse_graph_fourier(&zhat, &eig.eigenvectors).unwrap();
        assert!(back.max_abs_diff(&z) < 1e-12);
    }

    #[test]
    fn direct_filter_examples() {
        let a = example_a();
        let z = example_z();
        let ones = GraphFilter::new(vec![1.0; 4]).unwrap();
        assert!(spectral_filter_direct(&a, &z, &ones).unwrap().max_abs_diff(&z) < 1e-12);
        let zeros = GraphFilter::new(vec![0.0; 4]).unwrap();
        assert_eq!(spectral_filter_direct(&a, &z, &zeros).unwrap().max_abs(), 0.0);

        let eig = decompose(&a).unwrap();
        let neg = GraphFilter::new(eig.eigenvalues.iter().map(|l| -l).collect()).unwrap();
        let filtered = spectral_filter_direct(&a, &z, &neg).unwrap();
        let expected = matmul(&a.m, &z).unwrap().scale(-1.0);
        assert!(filtered.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn recursion_examples() {
        let l = DenseArray::diag(&[0.5, -1.0]);
        assert_eq!(cheb_recursion(&l, 0).unwrap(), DenseArray::eye(2));
        assert_eq!(cheb_recursion(&l, 1).unwrap(), l);
        assert_eq!(cheb_recursion(&l, 2).unwrap(), DenseArray::diag(&[-0.5, 1.0]));
    }

    #[test]
    fn scalar_polynomials() {
        for &x in &[-1.0, -0.3, 0.0, 0.6, 1.0] {
            let theta: f64 = f64::acos(x);
            for k in 0..7 {
                assert!((cheb_scalar(k, x) - (k as f64 * theta).cos()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn chebyshev_filter_examples() {
        let a = example_a();
        let z = example_z();
        let id = chebyshev_filter(&a, &z, &ChebCoeffs::new(vec![1.0]).unwrap()).unwrap();
        assert_eq!(id, z);
        let az = chebyshev_filter(&a, &z, &ChebCoeffs::new(vec![0.0, -1.0]).unwrap()).unwrap();
        assert!(az.max_abs_diff(&matmul(&a.m, &z).unwrap()) < 1e-15);

        let coeffs = ChebCoeffs::new(vec![0.7, -0.4, 1.3]).unwrap();
        let eig = decompose(&a).unwrap();
        let omega: Vec<f64> = eig
            .eigenvalues
            .iter()
            .map(|&lam| {
                let x = -lam;
                0.7 - 0.4 * x + 1.3 * (2.0 * x * x - 1.0)
            })
            .collect();
        let direct = spectral_filter_direct(&a, &z, &GraphFilter::new(omega).unwrap()).unwrap();
        let cheb = chebyshev_filter(&a, &z, &coeffs).unwrap();
        assert!(cheb.rel_err(&direct) < 1e-10);
    }

    #[test]
    fn empty_coefficients_rejected() {
        assert!(ChebCoeffs::new(vec![]).is_err());
    }
}
