//! End-to-end acceptance run. Criteria are checked in sequence (several are
//! timed) and each prints one PASS/FAIL line to stderr; the test fails if
//! any criterion does.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use snl_core::io::metrics::read_csv;
use snl_core::verify::{run_suite, Suite, SuiteReport};

const BIN: &str = env!("CARGO_BIN_EXE_snl");

const SEEDS: u64 = 5;
const TRAINING_BUDGET: Duration = Duration::from_secs(30 * 60);

struct Outcome {
    id: &'static str,
    passed: bool,
    detail: String,
}

fn say(line: &str) {
    // bypasses the harness's output capture, so the lines show on success too
    let _ = std::io::stderr().write_all(format!("{line}\n").as_bytes());
}

fn record(results: &mut Vec<Outcome>, id: &'static str, passed: bool, detail: String) {
    say(&format!("[{}] {id}: {detail}", if passed { "PASS" } else { "FAIL" }));
    results.push(Outcome { id, passed, detail });
}

fn snl(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("snl binary runs")
}

fn suite_detail(r: &SuiteReport, limit: Duration) -> String {
    let first = r.failures.first().and_then(|t| t.failure.as_deref()).unwrap_or("none");
    format!(
        "{} trials, worst error {:.3} of tolerance, {:.2}s (limit {}s), failures {} (first: {first})",
        r.trials,
        r.worst,
        r.elapsed.as_secs_f64(),
        limit.as_secs(),
        r.failures.len()
    )
}

fn timed_suite(results: &mut Vec<Outcome>, id: &'static str, suite: Suite, trials: usize, limit: Duration) {
    let r = run_suite(suite, trials, 0);
    let ok = r.passed() && r.worst <= 1.0 && r.elapsed < limit;
    record(results, id, ok, suite_detail(&r, limit));
}

/// Failures of the invariant suite split into spectral ones and the rest.
fn invariant_criteria(results: &mut Vec<Outcome>) {
    let r = run_suite(Suite::Invariants, 500, 0);
    let spectral = |msg: &str| ["asymmetry", "negative affinity", "eigenvalue"].iter().any(|k| msg.contains(k));
    let (mut spec_fail, mut other_fail) = (Vec::new(), Vec::new());
    for t in &r.failures {
        let msg = t.failure.clone().unwrap_or_default();
        if spectral(&msg) {
            spec_fail.push(msg);
        } else {
            other_fail.push(msg);
        }
    }
    let detail = |fails: &[String]| {
        format!(
            "{} trials, worst error {:.3} of tolerance, failures {} (first: {})",
            r.trials,
            r.worst,
            fails.len(),
            fails.first().map_or("none", String::as_str)
        )
    };
    record(
        results,
        "4 SNL affinity symmetric, non-negative, spectrum in [-1, 1]",
        spec_fail.is_empty(),
        detail(&spec_fail),
    );
    record(
        results,
        "8 zero-weight residual is exact; unmasked variants are permutation equivariant",
        other_fail.is_empty(),
        detail(&other_fail),
    );
}

/// `(params, MACs)` from the data row of `snl bench`.
fn bench(variant: &str) -> Option<(u64, u64)> {
    let out = snl(&["bench", "--variant", variant, "--c1", "1024", "--cs", "512", "--hw", "14x14"]);
    if !out.status.success() {
        return None;
    }
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    let cols: Vec<&str> = text.lines().nth(1)?.split_whitespace().collect();
    let num = |s: &str| s.replace(',', "").parse::<u64>().ok();
    Some((num(cols.get(4)?)?, num(cols.get(6)?)?))
}

fn cost_criterion(results: &mut Vec<Outcome>) {
    let expect = [("SNL", 2_621_440u64, 0.51e9), ("NL", 2_097_152, 0.41e9)];
    let mut ok = true;
    let mut parts = Vec::new();
    for (variant, params, macs) in expect {
        match bench(variant) {
            Some((p, m)) => {
                let rel = m as f64 / macs - 1.0;
                ok &= p == params && rel.abs() <= 0.2;
                parts.push(format!("{variant} params {p} (want {params}), {:.3} G-MACs ({:+.1}% vs {:.2})", m as f64 / 1e9, rel * 100.0, macs / 1e9));
            }
            None => {
                ok = false;
                parts.push(format!("{variant}: bench failed"));
            }
        }
    }
    record(results, "5 parameter and MAC counts", ok, parts.join("; "));
}

struct Run {
    variant: &'static str,
    seed: u64,
    dir: PathBuf,
}

fn train_args(run: &Run, config: &Path) -> Vec<String> {
    [
        "train",
        "--config",
        &config.display().to_string(),
        "--seed",
        &run.seed.to_string(),
        "--variant",
        run.variant,
        "--output-dir",
        &run.dir.display().to_string(),
        "--strict-deterministic",
    ]
    .map(String::from)
    .to_vec()
}

/// Runs every job, at most `available_parallelism` at a time.
fn train_all(runs: &[Run], config: &Path) -> Vec<bool> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(runs.len()).max(1);
    let next = std::sync::atomic::AtomicUsize::new(0);
    let ok: Vec<std::sync::atomic::AtomicBool> = runs.iter().map(|_| Default::default()).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                let Some(run) = runs.get(i) else { break };
                let status = Command::new(BIN).args(train_args(run, config)).output().map(|o| o.status.success());
                ok[i].store(status.unwrap_or(false), std::sync::atomic::Ordering::SeqCst);
            });
        }
    });
    ok.into_iter().map(|b| b.into_inner()).collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Training criteria: the block benefit, the sanity check on the plain
/// backbone's loss curve, and determinism against a repeated run.
fn training_criteria(results: &mut Vec<Outcome>, root: &Path) {
    let config = root.join("config.json");
    std::fs::write(&config, "{}").unwrap();
    let mut runs = Vec::new();
    for variant in ["none", "NL", "SNL"] {
        for seed in 0..SEEDS {
            runs.push(Run { variant, seed, dir: root.join(format!("{variant}-{seed}")) });
        }
    }
    let start = Instant::now();
    let ok = train_all(&runs, &config);
    let elapsed = start.elapsed();

    let mut finals = std::collections::HashMap::<&str, Vec<f64>>::new();
    let mut plain_curves = Vec::new();
    let mut broken = Vec::new();
    for (run, ok) in runs.iter().zip(ok) {
        match read_csv(&run.dir.join("metrics.csv")) {
            Ok(rows) if ok && rows.len() == 30 => {
                finals.entry(run.variant).or_default().push(rows[29].top1 * 100.0);
                if run.variant == "none" {
                    plain_curves.push(rows.iter().map(|r| r.train_loss).collect::<Vec<_>>());
                }
            }
            _ => broken.push(format!("{}-{}", run.variant, run.seed)),
        }
    }
    if broken.is_empty() {
        let med = |v: &str| median(finals[v].clone());
        let (plain, nl, snl) = (med("none"), med("NL"), med("SNL"));
        let list = |v: &str| finals[v].iter().map(|t| format!("{t:.2}")).collect::<Vec<_>>().join(" ");
        let ok = snl - plain >= 2.0 && snl >= nl && elapsed < TRAINING_BUDGET;
        record(
            results,
            "6 SNL beats plain by >= 2 points and matches NL (median top-1, 5 seeds)",
            ok,
            format!(
                "median top-1 plain {plain:.2} [{}], NL {nl:.2} [{}], SNL {snl:.2} [{}]; SNL - plain {:+.2}; {:.1} min for 15 runs",
                list("none"),
                list("NL"),
                list("SNL"),
                snl - plain,
                elapsed.as_secs_f64() / 60.0
            ),
        );
        let medians: Vec<f64> = (0..20).map(|e| median(plain_curves.iter().map(|c| c[e]).collect())).collect();
        let falling = medians.windows(2).all(|w| w[1] < w[0]);
        let rises: Vec<String> = medians
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[1] >= w[0])
            .map(|(e, w)| format!("{}->{}: {:.5}->{:.5}", e + 1, e + 2, w[0], w[1]))
            .collect();
        record(
            results,
            "  plain backbone median train loss strictly falls over epochs 1-20",
            falling,
            format!(
                "epoch 1 {:.4}, epoch 20 {:.4}; non-decreasing steps: {}",
                medians[0],
                medians[19],
                if rises.is_empty() { "none".into() } else { rises.join(", ") }
            ),
        );
    } else {
        record(results, "6 SNL beats plain by >= 2 points and matches NL (median top-1, 5 seeds)", false, format!("runs failed: {}", broken.join(", ")));
    }

    let again = Run { variant: "SNL", seed: 0, dir: root.join("SNL-0-again") };
    let first = std::fs::read(root.join("SNL-0").join("metrics.csv"));
    let repeat = train_all(std::slice::from_ref(&again), &config)[0];
    let second = std::fs::read(again.dir.join("metrics.csv"));
    let same = matches!((&first, &second), (Ok(a), Ok(b)) if a == b && !a.is_empty());
    record(
        results,
        "7 strict runs with the same config and seed give byte-identical metrics",
        repeat && same,
        match (first, second) {
            (Ok(a), Ok(b)) => format!("SNL seed 0, 30 epochs: {} and {} bytes, identical: {}", a.len(), b.len(), a == b),
            _ => "a metrics file is missing".into(),
        },
    );
}

fn fault_check(results: &mut Vec<Outcome>, root: &Path) {
    let dir = root.join("faults");
    let dir_s = dir.display().to_string();
    let out = snl(&["verify", "--suite", "reductions", "--trials", "20", "--output-dir", &dir_s, "--inject-fault", "normalize-sym-sign"]);
    let record_path = dir.join("reductions-0.json");
    let caught = out.status.code() == Some(1) && record_path.exists();
    let replay = snl(&["verify", "--replay", &record_path.display().to_string(), "--inject-fault", "normalize-sym-sign"]);
    let clean = snl(&["verify", "--suite", "reductions", "--trials", "20", "--output-dir", &dir_s]);
    record(
        results,
        "  an injected normalization bug fails the reductions suite and replays",
        caught && replay.status.code() == Some(1) && clean.status.success(),
        format!(
            "faulty run exit {:?}, replay exit {:?}, clean run exit {:?}",
            out.status.code(),
            replay.status.code(),
            clean.status.code()
        ),
    );
}

#[test]
fn acceptance() {
    let root = tempfile::tempdir().unwrap();
    let mut results = Vec::new();
    timed_suite(&mut results, "1 Chebyshev filter equals the eigenbasis filter", Suite::Oracle, 200, Duration::from_secs(10));
    timed_suite(&mut results, "2 variant closed forms equal the unified operator", Suite::Reductions, 200, Duration::from_secs(30));
    timed_suite(&mut results, "3 SNL block gradients match finite differences", Suite::Gradients, 20, Duration::from_secs(60));
    invariant_criteria(&mut results);
    cost_criterion(&mut results);
    fault_check(&mut results, root.path());
    training_criteria(&mut results, root.path());

    let failed: Vec<String> = results.iter().filter(|o| !o.passed).map(|o| format!("{}: {}", o.id, o.detail)).collect();
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}
