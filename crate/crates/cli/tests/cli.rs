use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_snl");

fn snl(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = r#"{
  "task": { "height": 6, "width": 16, "min_separation": 8, "train_size": 64, "test_size": 20 },
  "optim": { "epochs": 2, "batch_size": 16 }
}"#;

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("cfg.json");
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn bench_prints_exact_counts() {
    let o = snl(&["bench", "--variant", "snl", "--c1", "2", "--cs", "1", "--hw", "1x2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let row: Vec<String> = stdout(&o).lines().nth(1).unwrap().split_whitespace().map(String::from).collect();
    assert_eq!(row[..6], ["SNL", "2", "1", "1x2", "10", "4"]);
    let o = snl(&["bench", "--variant", "NL", "--c1", "1024", "--cs", "512"]);
    assert!(stdout(&o).contains("2,097,152"));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(snl(&["bench", "--variant", "XL", "--c1", "4", "--cs", "2"]).status.code(), Some(2));
    assert_eq!(snl(&["bench", "--variant", "NL", "--c1", "4", "--cs", "2", "--order", "3"]).status.code(), Some(2));
    let o = snl(&["train", "--config", "/nonexistent/cfg.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("config file not found"), "{}", stderr(&o));
}

#[test]
fn bad_config_key_is_named_with_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "{\n  \"seed\": 1,\n  \"lr\": 0.1\n}");
    let o = snl(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lr"), "{}", stderr(&o));
}

#[test]
fn verify_passes_and_a_broken_normalization_is_caught() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    let o = snl(&["verify", "--trials", "3", "--output-dir", &out]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert_eq!(stdout(&o).matches("PASS").count(), 4);

    let o = snl(&["verify", "--suite", "reductions", "--trials", "3", "--output-dir", &out, "--inject-fault", "normalize-sym-sign"]);
    assert_eq!(o.status.code(), Some(1));
    let record = dir.path().join("reductions-0.json");
    assert!(record.exists() && dir.path().join("reductions-0.snl").exists());
    let rec = record.display().to_string();
    assert_eq!(snl(&["verify", "--replay", &rec, "--inject-fault", "normalize-sym-sign"]).status.code(), Some(1));
    assert!(snl(&["verify", "--replay", &rec]).status.success());
}

#[test]
fn train_sample_and_attention_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run = dir.path().join("run");
    let run_s = run.display().to_string();
    let o = snl(&["train", "--config", &cfg, "--variant", "SNL", "--seed", "3", "--output-dir", &run_s, "--strict-deterministic"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("epoch,lr,train_loss,top1,top5\n"));

    let sample = dir.path().join("img");
    let o = snl(&["sample", "--config", &cfg, "--index", "2", "--output", &sample.display().to_string()]);
    assert!(o.status.success(), "{}", stderr(&o));

    // the block sits after the first stride-2 conv: a 3×8 grid
    let maps = dir.path().join("maps");
    let ck = run.join("checkpoint.snl").display().to_string();
    for input in ["img.snl", "img.pgm"] {
        let o = snl(&[
            "attn",
            "--checkpoint",
            &ck,
            "--input",
            &dir.path().join(input).display().to_string(),
            "--positions",
            "0,5,17",
            "--output-dir",
            &maps.display().to_string(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let read = |p: usize| -> Vec<f64> {
        std::fs::read_to_string(maps.join(format!("attn_{p}.csv")))
            .unwrap()
            .split([',', '\n'])
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().unwrap())
            .collect()
    };
    let (a0, a5, a17) = (read(0), read(5), read(17));
    assert_eq!(a0.len(), 24);
    // symmetric affinity: row i at column j equals row j at column i
    for (i, j, ri, rj) in [(0, 5, &a0, &a5), (5, 17, &a5, &a17), (0, 17, &a0, &a17)] {
        assert!((ri[j] - rj[i]).abs() <= 1e-12 * ri[j].abs().max(1e-300), "{i},{j}");
    }
    let pgm = std::fs::read(maps.join("attn_5.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n8 3\n255\n"));
    assert_eq!(pgm.len(), b"P5\n8 3\n255\n".len() + 24);

    let o = snl(&["attn", "--checkpoint", &ck, "--input", &dir.path().join("img.snl").display().to_string(), "--positions", "24"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn strict_training_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let mut csvs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = snl(&["train", "--config", &cfg, "--variant", "NL", "--output-dir", &out.display().to_string(), "--strict-deterministic"]);
        assert!(o.status.success(), "{}", stderr(&o));
        csvs.push(std::fs::read(out.join("metrics.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
}
