//! Randomized self-checks that run outside the test harness: the spectral
//! oracle against the Chebyshev filter, each variant's closed form against
//! the unified operator, block gradients against finite differences, and the
//! structural invariants of the block.
//!
//! Every trial is a pure function of its seed, so a failing case can be
//! saved and replayed.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::affinity::{compute_affinity_shifted, normalize_sym, Kernel, LogitShift};
use crate::blocks::{forward_variant_reference, Block, BlockConfig, BnMode, Variant};
use crate::error::{Error, Result};
use crate::io::checkpoint::Checkpoint;
use crate::io::fsutil::write_atomic;
use crate::random::{self, SeededRng};
use crate::spectral::{chebyshev_filter, decompose, spectral_filter_direct, ChebCoeffs, GraphFilter};
use crate::tensor::{finite_diff_grad, grad_rel_err, sym_eig, DenseArray, Step};
use crate::train::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Oracle,
    Reductions,
    Gradients,
    Invariants,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Oracle, Suite::Reductions, Suite::Gradients, Suite::Invariants];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Oracle => "oracle",
            Suite::Reductions => "reductions",
            Suite::Gradients => "gradients",
            Suite::Invariants => "invariants",
        }
    }

    pub fn default_trials(self) -> usize {
        match self {
            Suite::Oracle | Suite::Reductions => 200,
            Suite::Gradients => 20,
            Suite::Invariants => 500,
        }
    }

    fn code(self) -> u64 {
        self as u64 + 1
    }
}

impl std::fmt::Display for Suite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Usage(format!("unknown suite `{s}` (expected oracle, reductions, gradients or invariants)")))
    }
}

pub const ORACLE_TOL: f64 = 1e-10;
pub const REDUCTION_TOL: f64 = 1e-12;
pub const GRADIENT_TOL: f64 = 1e-5;
pub const SYMMETRY_TOL: f64 = 1e-12;
pub const SPECTRUM_TOL: f64 = 1e-10;
pub const EQUIVARIANCE_TOL: f64 = 1e-12;

/// Outcome of one randomized instance.
#[derive(Debug, Clone)]
pub struct Trial {
    pub suite: Suite,
    pub index: usize,
    pub seed: u64,
    /// Largest observed error as a fraction of its tolerance; `> 1` fails.
    pub worst: f64,
    /// First violated check, if any.
    pub failure: Option<String>,
    /// Inputs of the instance, for inspection after a failure.
    pub inputs: Vec<(String, DenseArray)>,
}

impl Trial {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub suite: Suite,
    pub trials: usize,
    pub worst: f64,
    pub failures: Vec<Trial>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

struct Checks {
    worst: f64,
    failure: Option<String>,
    inputs: Vec<(String, DenseArray)>,
}

impl Checks {
    fn input(&mut self, name: impl Into<String>, t: &DenseArray) {
        self.inputs.push((name.into(), t.clone()));
    }

    fn fail(&mut self, msg: String) {
        self.worst = f64::INFINITY;
        self.failure.get_or_insert(msg);
    }

    /// Records `value ≤ tol`.
    fn within(&mut self, label: &str, value: f64, tol: f64) {
        let ratio = value / tol;
        if ratio <= 1.0 {
            self.worst = self.worst.max(ratio);
        } else {
            self.fail(format!("{label}: {value:.3e} exceeds {tol:.0e}"));
        }
    }
}

/// Seed of trial `index` of `suite` in a run seeded with `seed`.
pub fn trial_seed(seed: u64, suite: Suite, index: usize) -> u64 {
    derive_seed(seed ^ (suite.code() << 56), index as u64)
}

pub fn run_trial(suite: Suite, index: usize, seed: u64) -> Trial {
    let mut rng = random::rng(seed);
    let mut checks = Checks {
        worst: 0.0,
        failure: None,
        inputs: Vec::new(),
    };
    let outcome = match suite {
        Suite::Oracle => oracle_trial(&mut rng, &mut checks),
        Suite::Reductions => reduction_trial(&mut rng, &mut checks),
        Suite::Gradients => gradient_trial(&mut rng, &mut checks),
        Suite::Invariants => invariant_trial(&mut rng, &mut checks),
    };
    if let Err(e) = outcome {
        checks.fail(e.to_string());
    }
    Trial {
        suite,
        index,
        seed,
        worst: checks.worst,
        failure: checks.failure,
        inputs: checks.inputs,
    }
}

pub fn run_suite(suite: Suite, trials: usize, seed: u64) -> SuiteReport {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for index in 0..trials {
        let t = run_trial(suite, index, trial_seed(seed, suite, index));
        worst = worst.max(t.worst);
        if !t.passed() {
            failures.push(t);
        }
    }
    SuiteReport {
        suite,
        trials,
        worst,
        failures,
        elapsed: start.elapsed(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub suite: Suite,
    pub index: usize,
    pub seed: u64,
    pub failure: String,
    /// SNL1 file holding the trial inputs, relative to the record.
    pub inputs: String,
}

/// Writes `<suite>-<index>.json` and its `.snl` inputs into `dir`; returns
/// the path of the JSON record.
pub fn save_failure(dir: &Path, trial: &Trial) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let stem = format!("{}-{}", trial.suite, trial.index);
    let mut ck = Checkpoint::default();
    for (name, t) in &trial.inputs {
        ck.push_array(name, t)?;
    }
    let inputs = format!("{stem}.snl");
    ck.save(&dir.join(&inputs))?;
    let record = FailureRecord {
        suite: trial.suite,
        index: trial.index,
        seed: trial.seed,
        failure: trial.failure.clone().unwrap_or_default(),
        inputs,
    };
    let path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&record).expect("record serializes");
    write_atomic(&path, text.as_bytes())?;
    Ok(path)
}

/// Re-runs a saved failure. Errors if the regenerated inputs differ from the
/// saved ones.
pub fn replay(record_path: &Path) -> Result<Trial> {
    let text = std::fs::read_to_string(record_path)
        .map_err(|e| Error::Usage(format!("cannot read {}: {e}", record_path.display())))?;
    let record: FailureRecord =
        serde_json::from_str(&text).map_err(|e| Error::Usage(format!("{}: {e}", record_path.display())))?;
    let trial = run_trial(record.suite, record.index, record.seed);
    let dir = record_path.parent().unwrap_or(Path::new("."));
    let saved = Checkpoint::load(&dir.join(&record.inputs))?;
    let mut fresh = Checkpoint::default();
    for (name, t) in &trial.inputs {
        fresh.push_array(name, t)?;
    }
    if !fresh.bits_eq(&saved) {
        return Err(Error::Usage(format!(
            "{}: regenerated inputs differ from {}",
            record_path.display(),
            record.inputs
        )));
    }
    Ok(trial)
}

fn random_kernel(rng: &mut SeededRng) -> Kernel {
    *[Kernel::EmbeddedGaussian, Kernel::Gaussian].choose(rng).unwrap()
}

fn random_block(rng: &mut SeededRng, variant: Variant, max_side: usize, max_c1: usize) -> Result<Block> {
    let (h, w) = loop {
        let hw = (rng.gen_range(1..=max_side), rng.gen_range(1..=max_side));
        if hw.0 * hw.1 >= 2 {
            break hw;
        }
    };
    let c1 = rng.gen_range(1..=max_c1);
    let cs = rng.gen_range(1..=c1);
    let mut cfg = BlockConfig::new(variant, c1, cs).with_spatial(h, w).with_kernel(random_kernel(rng));
    if variant == Variant::Snl {
        cfg = cfg.with_order(rng.gen_range(1..=4));
    }
    Block::init(cfg, rng)
}

fn block_input(rng: &mut SeededRng, block: &Block) -> DenseArray {
    let (h, w) = block.cfg.spatial.expect("random blocks are spatial");
    random::normal(rng, &[h * w, block.cfg.c1], 0.8)
}

fn describe(block: &Block) -> String {
    let c = &block.cfg;
    let (h, w) = c.spatial.unwrap_or((0, 0));
    format!("{} {}x{} c1={} cs={} K={} {}", c.variant, h, w, c.c1, c.cs, c.order, c.kernel.name())
}

fn oracle_trial(rng: &mut SeededRng, c: &mut Checks) -> Result<()> {
    let n = rng.gen_range(2..=16);
    let ch = rng.gen_range(1..=8);
    let cs = rng.gen_range(1..=4);
    let phi = random::normal(rng, &[n, cs], 0.7);
    let psi = random::normal(rng, &[n, cs], 0.7);
    let z = random::normal(rng, &[n, ch], 1.0);
    c.input("phi", &phi);
    c.input("psi", &psi);
    c.input("z", &z);
    let raw = compute_affinity_shifted(&phi, &psi, Kernel::EmbeddedGaussian, LogitShift::Global)?;
    let a = normalize_sym(&raw, false)?;
    let eig = decompose(&a)?;
    for k in [1, 2, 3, 5] {
        let theta = random::normal(rng, &[k], 1.0);
        c.input(format!("theta{k}"), &theta);
        let coeffs = ChebCoeffs::new(theta.data().to_vec())?;
        let fast = chebyshev_filter(&a, &z, &coeffs)?;
        let exact = spectral_filter_direct(&a, &z, &GraphFilter::from_chebyshev(&coeffs, &eig.eigenvalues)?)?;
        c.within(&format!("n={n} c={ch} K={k}"), fast.rel_err(&exact), ORACLE_TOL);
    }
    Ok(())
}

fn reduction_trial(rng: &mut SeededRng, c: &mut Checks) -> Result<()> {
    for variant in Variant::ALL {
        let block = random_block(rng, variant, 4, 6)?;
        let x = block_input(rng, &block);
        c.input(format!("{variant}.x"), &x);
        for (name, t) in block.params.named() {
            c.input(format!("{variant}.{name}"), t);
        }
        let reference = forward_variant_reference(&x, &block.params, &block.cfg)?;
        let unified = block.forward_unnormalized(&x)?;
        c.within(&describe(&block), unified.rel_err(&reference), REDUCTION_TOL);
    }
    Ok(())
}

/// `Σ_b ⟨r_b, Y_b⟩` for a train-mode batch.
fn probe_loss(block: &Block, xs: &[DenseArray], r: &[DenseArray]) -> f64 {
    let (ys, _) = block.forward_batch(xs, BnMode::Train).expect("probe forward");
    ys.iter().zip(r).map(|(y, r)| y.hadamard(r).expect("same shape").sum()).sum()
}

fn gradient_trial(rng: &mut SeededRng, c: &mut Checks) -> Result<()> {
    let n = rng.gen_range(4..=8);
    let c1 = rng.gen_range(2..=4);
    let cs = rng.gen_range(1..=c1);
    let cfg = BlockConfig::new(Variant::Snl, c1, cs).with_order(rng.gen_range(1..=3));
    let mut block = Block::init(cfg, rng)?;
    block.params.bn.gamma = random::uniform(rng, &[c1], 0.5, 1.5);
    block.params.bn.beta = random::normal(rng, &[c1], 0.3);
    let xs: Vec<DenseArray> = (0..2).map(|_| random::normal(rng, &[n, c1], 0.8)).collect();
    let r: Vec<DenseArray> = (0..2).map(|_| random::normal(rng, &[n, c1], 1.0)).collect();
    for (b, x) in xs.iter().enumerate() {
        c.input(format!("x{b}"), x);
        c.input(format!("r{b}"), &r[b]);
    }
    for (name, t) in block.params.named() {
        c.input(name, t);
    }
    let label = format!("SNL n={n} c1={c1} cs={cs} K={}", block.cfg.order);
    let step = Step::Scaled(1e-6);
    let floor = 1e-6;

    let (_, cache) = block.forward_batch(&xs, BnMode::Train)?;
    let (dxs, grads) = block.backward_batch(&cache, &r)?;
    for (b, dx) in dxs.iter().enumerate() {
        let fd = finite_diff_grad(
            |p| {
                let mut probe = xs.clone();
                probe[b] = p.clone();
                probe_loss(&block, &probe, &r)
            },
            &xs[b],
            step,
        )?;
        c.within(&format!("{label} d x{b}"), grad_rel_err(dx, &fd, floor), GRADIENT_TOL);
    }
    let names: Vec<String> = block.params.named().into_iter().map(|(n, _)| n).collect();
    for (t, analytic) in grads.tensors().into_iter().enumerate() {
        let base = block.params.tensors_mut()[t].clone();
        let mut probe = block.clone();
        let fd = finite_diff_grad(
            |p| {
                *probe.params.tensors_mut()[t] = p.clone();
                probe_loss(&probe, &xs, &r)
            },
            &base,
            step,
        )?;
        c.within(&format!("{label} d {}", names[t]), grad_rel_err(analytic, &fd, floor), GRADIENT_TOL);
    }
    Ok(())
}

fn permute_rows(x: &DenseArray, perm: &[usize]) -> DenseArray {
    let mut out = DenseArray::zeros(x.shape());
    for (i, &p) in perm.iter().enumerate() {
        out.row_mut(i).copy_from_slice(x.row(p));
    }
    out
}

fn invariant_trial(rng: &mut SeededRng, c: &mut Checks) -> Result<()> {
    // symmetry, non-negativity and spectrum of the SNL affinity
    let block = random_block(rng, Variant::Snl, 4, 6)?;
    let x = block_input(rng, &block);
    c.input("snl.x", &x);
    for (name, t) in block.params.named() {
        c.input(format!("snl.{name}"), t);
    }
    let a = block.forward(&x, BnMode::Train)?.attention.m;
    let label = describe(&block);
    c.within(&format!("{label} asymmetry"), a.asymmetry(), SYMMETRY_TOL);
    let min = a.data().iter().copied().fold(f64::INFINITY, f64::min);
    if !(min >= 0.0) {
        c.fail(format!("{label}: negative affinity entry {min:.3e}"));
    }
    let eig = sym_eig(&a)?;
    let spread = eig.eigenvalues.iter().map(|l| l.abs() - 1.0).fold(0.0, f64::max);
    c.within(&format!("{label} eigenvalue beyond [-1, 1]"), spread, SPECTRUM_TOL);

    for variant in Variant::ALL {
        let mut block = random_block(rng, variant, 4, 6)?;
        let x = block_input(rng, &block);
        c.input(format!("{variant}.x"), &x);
        for (name, t) in block.params.named() {
            c.input(format!("{variant}.{name}"), t);
        }
        let label = describe(&block);

        // CC's mask ties nodes to grid coordinates, so it is not equivariant
        if variant != Variant::Cc {
            let mut perm: Vec<usize> = (0..x.rows()).collect();
            perm.shuffle(rng);
            let y = block.forward(&x, BnMode::Train)?.y;
            let py = block.forward(&permute_rows(&x, &perm), BnMode::Train)?.y;
            c.within(&format!("{label} permutation"), py.rel_err(&permute_rows(&y, &perm)), EQUIVARIANCE_TOL);
        }

        block.params.zero_outputs();
        let y = block.forward(&x, BnMode::Inference)?.y;
        let exact = y.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if !exact {
            c.fail(format!("{label}: zeroed output weights do not give Y == X (max diff {:.3e})", y.max_abs_diff(&x)));
        }
    }
    Ok(())
}
