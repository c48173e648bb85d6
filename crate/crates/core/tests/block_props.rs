use proptest::prelude::*;
use snl_core::affinity::Kernel;
use snl_core::blocks::{count_flops, count_params, Block, BlockConfig, BnMode, Variant};
use snl_core::random;
use snl_core::verify::{run_trial, Suite};
use snl_core::DenseArray;

type Mat = Vec<Vec<f64>>;

fn to_mat(a: &DenseArray) -> Mat {
    (0..a.rows()).map(|i| a.row(i).to_vec()).collect()
}

fn mul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    (0..n)
        .map(|i| (0..m).map(|j| (0..k).map(|p| a[i][p] * b[p][j]).sum()).collect())
        .collect()
}

fn logits(x: &Mat, block: &Block) -> (Mat, Mat) {
    let p = &block.params;
    let phi = mul(x, &to_mat(&p.w_phi));
    let psi = mul(x, &to_mat(&p.w_psi));
    let s = phi.iter().map(|a| psi.iter().map(|b| a.iter().zip(b).map(|(u, v)| u * v).sum()).collect()).collect();
    (s, mul(x, &to_mat(p.w_g.as_ref().unwrap())))
}

/// `x_i + Σ_j softmax_j(φ_i·ψ_j) g_j W`, written out entry by entry.
fn naive_nl(x: &DenseArray, block: &Block) -> Mat {
    let xm = to_mat(x);
    let (s, g) = logits(&xm, block);
    let attn: Mat = s
        .iter()
        .map(|row| {
            let e: Vec<f64> = row.iter().map(|v| v.exp()).collect();
            let total: f64 = e.iter().sum();
            e.iter().map(|v| v / total).collect()
        })
        .collect();
    let f = mul(&mul(&attn, &g), &to_mat(&block.params.w_out[0]));
    add(&xm, &f)
}

/// `x + Σ_k A^k Z W_{k+1}` with `A_ij = m̂_ij / √(d_i d_j)`, `m̂` the
/// symmetrized exponential kernel.
fn naive_snl(x: &DenseArray, block: &Block) -> Mat {
    let xm = to_mat(x);
    let (s, z) = logits(&xm, block);
    let n = s.len();
    let m_hat: Mat = (0..n).map(|i| (0..n).map(|j| 0.5 * (s[i][j].exp() + s[j][i].exp())).collect()).collect();
    let d: Vec<f64> = m_hat.iter().map(|r| r.iter().sum()).collect();
    let a: Mat = (0..n).map(|i| (0..n).map(|j| m_hat[i][j] / (d[i] * d[j]).sqrt()).collect()).collect();
    let mut out = xm.clone();
    let mut power = z;
    for (k, w) in block.params.w_out.iter().enumerate() {
        if k > 0 {
            power = mul(&a, &power);
        }
        out = add(&out, &mul(&power, &to_mat(w)));
    }
    out
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(u, v)| u + v).collect()).collect()
}

fn rel_err(got: &DenseArray, want: &Mat) -> f64 {
    let scale = want.iter().flatten().fold(1.0f64, |m, v| m.max(v.abs()));
    got.data().iter().zip(want.iter().flatten()).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max) / scale
}

fn permute(x: &DenseArray, perm: &[usize]) -> DenseArray {
    DenseArray::from_rows(&perm.iter().map(|&p| x.row(p).to_vec()).collect::<Vec<_>>())
}

fn block(variant: Variant, seed: u64, h: usize, w: usize, c1: usize, cs: usize) -> (Block, DenseArray) {
    let mut rng = random::rng(seed);
    let cfg = BlockConfig::new(variant, c1, cs.min(c1)).with_spatial(h, w);
    let b = Block::init(cfg, &mut rng).unwrap();
    let x = random::normal(&mut rng, &[h * w, c1], 0.8);
    (b, x)
}

fn variant() -> impl Strategy<Value = Variant> {
    prop::sample::select(Variant::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nl_block_matches_entrywise_attention(seed in any::<u64>(), n in 2usize..13, c1 in 1usize..7, cs in 1usize..5) {
        let (b, x) = block(Variant::Nl, seed, n, 1, c1, cs);
        prop_assert!(rel_err(&b.forward_unnormalized(&x).unwrap(), &naive_nl(&x, &b)) < 1e-12);
    }

    #[test]
    fn snl_block_matches_entrywise_polynomial(seed in any::<u64>(), n in 2usize..13, c1 in 1usize..7, cs in 1usize..5, order in 1usize..5) {
        let mut rng = random::rng(seed);
        let cfg = BlockConfig::new(Variant::Snl, c1, cs.min(c1)).with_order(order);
        let b = Block::init(cfg, &mut rng).unwrap();
        let x = random::normal(&mut rng, &[n, c1], 0.8);
        prop_assert!(rel_err(&b.forward_unnormalized(&x).unwrap(), &naive_snl(&x, &b)) < 1e-12);
    }

    #[test]
    fn snl_attention_is_symmetric_and_nonnegative(seed in any::<u64>(), h in 1usize..5, w in 2usize..5, c1 in 1usize..7) {
        let (b, x) = block(Variant::Snl, seed, h, w, c1, c1 / 2 + 1);
        let a = b.forward(&x, BnMode::Train).unwrap().attention.m;
        prop_assert!(a.asymmetry() <= 1e-12);
        prop_assert!(a.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn unmasked_variants_are_permutation_equivariant(
        v in variant().prop_filter("CC is tied to the grid", |v| *v != Variant::Cc),
        seed in any::<u64>(), n in 2usize..13, c1 in 1usize..7, perm_seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let (b, x) = block(v, seed, n, 1, c1, c1);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut random::rng(perm_seed));
        let y = b.forward(&x, BnMode::Train).unwrap().y;
        let py = b.forward(&permute(&x, &perm), BnMode::Train).unwrap().y;
        prop_assert!(py.rel_err(&permute(&y, &perm)) <= 1e-12);
    }

    #[test]
    fn zeroed_output_weights_give_the_identity(v in variant(), seed in any::<u64>(), h in 1usize..5, w in 2usize..5, c1 in 1usize..7) {
        let (mut b, x) = block(v, seed, h, w, c1, c1);
        b.params.zero_outputs();
        let y = b.forward(&x, BnMode::Inference).unwrap().y;
        prop_assert!(y.data().iter().zip(x.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn verification_trials_pass_for_any_seed(seed in any::<u64>()) {
        for suite in [Suite::Oracle, Suite::Reductions, Suite::Invariants] {
            let t = run_trial(suite, 0, seed);
            prop_assert!(t.passed(), "{suite}: {:?}", t.failure);
        }
    }
}

#[test]
fn gradient_trials_pass() {
    for i in 0..4 {
        let t = run_trial(Suite::Gradients, i, 1000 + i as u64);
        assert!(t.passed(), "{:?}", t.failure);
    }
}

#[test]
fn large_block_costs() {
    let snl = BlockConfig::new(Variant::Snl, 1024, 512);
    let nl = BlockConfig::new(Variant::Nl, 1024, 512);
    assert_eq!(count_params(&snl).unwrap().weights, 2_621_440);
    assert_eq!(count_params(&nl).unwrap().weights, 2_097_152);
    // n = 196 positions: three 1024→512 embeddings, the n×n logits and A·Z
    // over 512 channels, one 512→1024 output (two for SNL).
    let n = 196u64;
    let emb = 3 * n * 1024 * 512;
    let nl_macs = emb + n * n * 512 + n * n * 512 + n * 512 * 1024;
    assert_eq!(count_flops(&nl, 14, 14).unwrap(), nl_macs);
    assert_eq!(count_flops(&snl, 14, 14).unwrap(), nl_macs + n * 512 * 1024);
}

#[test]
fn dot_kernel_needs_an_explicit_override_for_snl() {
    let cfg = BlockConfig::new(Variant::Snl, 4, 2).with_kernel(Kernel::Dot);
    assert!(Block::init(cfg, &mut random::rng(0)).is_err());
}
