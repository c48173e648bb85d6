use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use snl_core::blocks::{count_flops, count_params, BlockConfig, Variant};
use snl_core::fault::{self, Fault};
use snl_core::io::checkpoint::Checkpoint;
use snl_core::io::fsutil::write_atomic;
use snl_core::io::pgm::{attention_rows, decode_pgm, write_pgm};
use snl_core::io::ExperimentConfig;
use snl_core::train::{datasets, train_with, TinyBackbone, CHECKPOINT_FILE, METRICS_FILE};
use snl_core::verify::{self, Suite};
use snl_core::{DenseArray, Error};

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "snl", version, about = "Spectral nonlocal blocks: checks, training and inspection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the randomized verification suites.
    Verify(VerifyArgs),
    /// Train the small backbone on the synthetic task.
    Train(TrainArgs),
    /// Print parameter and multiply-accumulate counts of a block.
    Bench(BenchArgs),
    /// Export attention rows of a trained model as PGM heatmaps.
    Attn(AttnArgs),
    /// Write one synthetic test image (SNL1 and PGM) for `attn`.
    Sample(SampleArgs),
}

#[derive(Args)]
struct VerifyArgs {
    /// Suite to run (repeatable); all suites when omitted.
    #[arg(long = "suite", value_name = "NAME")]
    suites: Vec<Suite>,
    /// Trials per suite; each suite's default when omitted.
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where failing cases are written.
    #[arg(long, default_value = "verify-failures")]
    output_dir: PathBuf,
    /// Re-run a failing case saved by an earlier run.
    #[arg(long, value_name = "RECORD", conflicts_with_all = ["suites", "trials"])]
    replay: Option<PathBuf>,
    #[arg(long, hide = true)]
    inject_fault: Option<Fault>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Block variant, or `none` for the plain backbone.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    strict_deterministic: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    variant: Variant,
    #[arg(long)]
    c1: usize,
    #[arg(long)]
    cs: usize,
    /// Spatial extent as HxW.
    #[arg(long, default_value = "14x14", value_parser = parse_hw)]
    hw: (usize, usize),
    /// Number of filter terms (SNL only).
    #[arg(long, default_value_t = 2)]
    order: usize,
}

#[derive(Args)]
struct AttnArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// P5 greymap (grey g read as g/127.5 - 1) or SNL1 file with an `image` entry.
    #[arg(long)]
    input: PathBuf,
    /// Comma-separated query positions, row-major on the block's grid.
    #[arg(long, value_delimiter = ',', required = true)]
    positions: Vec<usize>,
    #[arg(long, default_value = ".")]
    output_dir: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Output path without extension; `.snl` and `.pgm` are appended.
    #[arg(long, default_value = "sample")]
    output: PathBuf,
}

fn parse_hw(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("expected HxW, got `{s}`"));
    let (h, w) = (parse(h)?, parse(w)?);
    if h == 0 || w == 0 {
        return Err("extents must be at least 1".into());
    }
    Ok((h, w))
}

enum Failure {
    Suites,
    Error(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) | Error::Json(_) | Error::Checkpoint(_) => EXIT_USAGE,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Verify(a) => run_verify(a),
        Command::Train(a) => run_train(a).map_err(Failure::from),
        Command::Bench(a) => run_bench(a).map_err(Failure::from),
        Command::Attn(a) => run_attn(a).map_err(Failure::from),
        Command::Sample(a) => run_sample(a).map_err(Failure::from),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Suites) => ExitCode::from(EXIT_FAILURE),
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run_verify(a: VerifyArgs) -> Result<(), Failure> {
    if let Some(f) = a.inject_fault {
        fault::set(f, true);
    }
    if let Some(record) = &a.replay {
        let t = verify::replay(record)?;
        println!("{} trial {} (seed {}): {}", t.suite, t.index, t.seed, t.failure.as_deref().unwrap_or("pass"));
        return if t.passed() { Ok(()) } else { Err(Failure::Suites) };
    }
    let suites = if a.suites.is_empty() { Suite::ALL.to_vec() } else { a.suites };
    println!("{:<12} {:>7} {:>12} {:>9}  result", "suite", "trials", "worst/tol", "time");
    let mut all_passed = true;
    for suite in suites {
        let trials = a.trials.unwrap_or(suite.default_trials());
        let r = verify::run_suite(suite, trials, a.seed);
        println!(
            "{:<12} {:>7} {:>12.3e} {:>8.2}s  {}",
            suite.name(),
            r.trials,
            r.worst,
            r.elapsed.as_secs_f64(),
            if r.passed() { "PASS" } else { "FAIL" }
        );
        if let Some(first) = r.failures.first() {
            all_passed = false;
            let path = verify::save_failure(&a.output_dir, first)?;
            println!(
                "  {} of {} trials failed; first: trial {}: {}",
                r.failures.len(),
                r.trials,
                first.index,
                first.failure.as_deref().unwrap_or_default()
            );
            println!("  saved to {} (replay with `snl verify --replay {0}`)", path.display());
        }
    }
    if all_passed {
        Ok(())
    } else {
        Err(Failure::Suites)
    }
}

fn run_train(a: TrainArgs) -> snl_core::Result<()> {
    if !a.config.exists() {
        return Err(Error::Usage(format!("config file not found: {}", a.config.display())));
    }
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(v) = &a.variant {
        cfg.variant = if v.eq_ignore_ascii_case("none") { None } else { Some(v.parse()?) };
    }
    if let Some(dir) = a.output_dir {
        cfg.output_dir = dir;
    }
    cfg.strict_deterministic |= a.strict_deterministic;
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let variant = cfg.variant.map_or("none", Variant::name);
    eprintln!("training {variant} (seed {}) into {}", cfg.seed, cfg.output_dir.display());
    let report = train_with(&cfg, Some(&cfg.output_dir), |r| {
        eprintln!(
            "epoch {:>3}  lr {:.5}  loss {:.4}  top1 {:.4}  top5 {:.4}",
            r.epoch, r.lr, r.train_loss, r.top1, r.top5
        );
    })?;
    let dir = &cfg.output_dir;
    println!("metrics: {}", dir.join(METRICS_FILE).display());
    println!("checkpoint: {}", dir.join(CHECKPOINT_FILE).display());
    if let Some(last) = report.history.last() {
        println!("final top1 {:.4} top5 {:.4}", last.top1, last.top5);
    }
    Ok(())
}

fn run_bench(a: BenchArgs) -> snl_core::Result<()> {
    let (h, w) = a.hw;
    let mut cfg = BlockConfig::new(a.variant, a.c1, a.cs).with_spatial(h, w);
    if a.variant == Variant::Snl {
        cfg = cfg.with_order(a.order);
    } else if a.order != 2 {
        return Err(Error::Usage(format!("--order applies to SNL only ({} has two terms)", a.variant)));
    }
    let params = count_params(&cfg)?;
    let macs = count_flops(&cfg, h, w)?;
    println!("{:<8} {:>6} {:>6} {:>8} {:>14} {:>8} {:>16} {:>8}", "variant", "c1", "cs", "hw", "params", "bn", "MACs", "G-MACs");
    println!(
        "{:<8} {:>6} {:>6} {:>8} {:>14} {:>8} {:>16} {:>8.3}",
        a.variant.name(),
        a.c1,
        a.cs,
        format!("{h}x{w}"),
        group(params.weights),
        group(params.batch_norm),
        group(macs),
        macs as f64 / 1e9
    );
    Ok(())
}

/// `1234567` as `1,234,567`.
fn group(v: u64) -> String {
    let s = v.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn load_image(path: &Path, model: &TinyBackbone) -> snl_core::Result<DenseArray> {
    let bytes = std::fs::read(path).map_err(|e| Error::Usage(format!("cannot read {}: {e}", path.display())))?;
    let (h, w) = (model.cfg.height, model.cfg.width);
    let image = if bytes.starts_with(b"P5") {
        let (ph, pw, pixels) = decode_pgm(&bytes)?;
        if (ph, pw) != (h, w) {
            return Err(Error::Usage(format!("input is {ph}x{pw}, the model expects {h}x{w}")));
        }
        DenseArray::matrix(h * w, 1, pixels.iter().map(|&g| g as f64 / 127.5 - 1.0).collect())?
    } else {
        Checkpoint::from_bytes(&bytes)?
            .array("image")?
            .reshape(&[h * w, 1])
            .map_err(|_| Error::Usage(format!("image entry of {} does not hold {h}x{w} pixels", path.display())))?
    };
    Ok(image)
}

fn run_attn(a: AttnArgs) -> snl_core::Result<()> {
    let model = TinyBackbone::from_checkpoint(&Checkpoint::load(&a.checkpoint)?)?;
    let image = load_image(&a.input, &model)?;
    let (attention, h, w) = model.attention(&image)?;
    let rows = attention_rows(&attention.m, &a.positions, h, w)?;
    std::fs::create_dir_all(&a.output_dir)?;
    for (p, row) in a.positions.iter().zip(&rows) {
        let pgm = a.output_dir.join(format!("attn_{p}.pgm"));
        write_pgm(&pgm, h, w, row.data())?;
        let mut csv = String::new();
        for r in 0..h {
            let line: Vec<String> = row.row(r).iter().map(|v| v.to_string()).collect();
            writeln!(csv, "{}", line.join(",")).unwrap();
        }
        let csv_path = a.output_dir.join(format!("attn_{p}.csv"));
        write_atomic(&csv_path, csv.as_bytes())?;
        println!("position {p} ({}, {}): {} {}", p / w, p % w, pgm.display(), csv_path.display());
    }
    Ok(())
}

fn run_sample(a: SampleArgs) -> snl_core::Result<()> {
    let cfg = match &a.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let (_, test) = datasets(&cfg)?;
    let image = test.images.get(a.index).ok_or_else(|| {
        Error::Usage(format!("index {} out of range (test split has {} images)", a.index, test.len()))
    })?;
    let mut ck = Checkpoint::default();
    ck.push_array("image", image)?;
    let snl = a.output.with_extension("snl");
    let pgm = a.output.with_extension("pgm");
    ck.save(&snl)?;
    write_pgm(&pgm, test.height, test.width, image.data())?;
    println!("label {}: {} {}", test.labels[a.index], snl.display(), pgm.display());
    Ok(())
}
