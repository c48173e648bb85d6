//! Symmetric eigendecomposition by cyclic Jacobi rotations.

use super::DenseArray;
use crate::error::{Error, Result};

/// Input symmetry tolerance (absolute).
pub const SYMMETRY_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;

/// Eigenvalues (ascending) and the matching orthonormal eigenvectors, stored
/// as the columns of `eigenvectors`.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: DenseArray,
}

impl SpectralDecomposition {
    /// `U · diag(Λ) · Uᵀ`
    pub fn reconstruct(&self) -> DenseArray {
        let n = self.eigenvalues.len();
        let u = &self.eigenvectors;
        let mut out = DenseArray::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for (k, lam) in self.eigenvalues.iter().enumerate() {
                    s += u.get(i, k) * lam * u.get(j, k);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    /// Column `k` of `U`.
    pub fn eigenvector(&self, k: usize) -> Vec<f64> {
        let n = self.eigenvalues.len();
        (0..n).map(|i| self.eigenvectors.get(i, k)).collect()
    }
}

/// Off-diagonal Frobenius norm.
fn off_norm(a: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[i * n + j] * a[i * n + j];
            }
        }
    }
    s.sqrt()
}

/// Decomposes a symmetric matrix as `s = U diag(Λ) Uᵀ`.
///
/// Sweeps over all `(p, q)` pairs in row order until the off-diagonal
/// Frobenius norm falls below `1e-14 · ‖s‖_F`. Each rotation uses the
/// Rutishauser update with `t = sgn(θ)/(|θ| + √(θ²+1))`, which keeps the
/// rotation angle at most π/4.
pub fn sym_eig(s: &DenseArray) -> Result<SpectralDecomposition> {
    if !s.is_square() {
        return Err(Error::Shape {
            op: "sym_eig",
            left: s.shape().to_vec(),
            right: s.shape().to_vec(),
        });
    }
    let max_dev = s.asymmetry();
    if max_dev > SYMMETRY_TOL || !s.is_finite() {
        return Err(Error::Asymmetric {
            op: "sym_eig",
            max_dev,
        });
    }
    let n = s.rows();
    let mut a = s.data().to_vec();
    // Work on the exactly symmetrized input so rotations stay consistent.
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[i * n + j] + a[j * n + i]);
            a[i * n + j] = m;
            a[j * n + i] = m;
        }
    }
    let mut v = DenseArray::eye(n).into_data();
    let target = 1e-14 * s.frobenius_norm();

    let mut sweeps = 0;
    loop {
        let off = off_norm(&a, n);
        if off <= target {
            break;
        }
        if sweeps == MAX_SWEEPS {
            return Err(Error::NoConvergence { sweeps, off });
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                let tau = sn / (1.0 + c);

                a[p * n + p] = app - t * apq;
                a[q * n + q] = aqq + t * apq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for r in 0..n {
                    if r == p || r == q {
                        continue;
                    }
                    let arp = a[r * n + p];
                    let arq = a[r * n + q];
                    let nrp = arp - sn * (arq + tau * arp);
                    let nrq = arq + sn * (arp - tau * arq);
                    a[r * n + p] = nrp;
                    a[p * n + r] = nrp;
                    a[r * n + q] = nrq;
                    a[q * n + r] = nrq;
                }
                for r in 0..n {
                    let vrp = v[r * n + p];
                    let vrq = v[r * n + q];
                    v[r * n + p] = vrp - sn * (vrq + tau * vrp);
                    v[r * n + q] = vrq + sn * (vrp - tau * vrq);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i * n + i].total_cmp(&a[j * n + j]).then(i.cmp(&j)));
    let eigenvalues = order.iter().map(|&k| a[k * n + k]).collect();
    let mut u = DenseArray::zeros(&[n, n]);
    for (col, &k) in order.iter().enumerate() {
        for r in 0..n {
            u.set(r, col, v[r * n + k]);
        }
    }
    Ok(SpectralDecomposition {
        eigenvalues,
        eigenvectors: u,
    })
}
