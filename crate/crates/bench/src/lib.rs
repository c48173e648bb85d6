//! Shared inputs for the benchmarks.

use snl_core::affinity::{compute_affinity_shifted, normalize_sym, AffinityMatrix, Kernel, LogitShift};
use snl_core::random;
use snl_core::DenseArray;

/// Symmetric normalized affinity on `n` nodes from random embeddings.
pub fn symmetric_affinity(n: usize, seed: u64) -> AffinityMatrix {
    let mut rng = random::rng(seed);
    let phi = random::normal(&mut rng, &[n, 8], 0.5);
    let psi = random::normal(&mut rng, &[n, 8], 0.5);
    let raw = compute_affinity_shifted(&phi, &psi, Kernel::EmbeddedGaussian, LogitShift::Global)
        .expect("finite affinity");
    normalize_sym(&raw, false).expect("positive degrees")
}

pub fn features(n: usize, c: usize, seed: u64) -> DenseArray {
    random::normal(&mut random::rng(seed), &[n, c], 1.0)
}
