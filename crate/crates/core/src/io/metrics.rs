use std::fmt::Write as _;
use std::path::Path;

use super::fsutil::write_atomic;
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "epoch,lr,train_loss,top1,top5";

/// One line of the metrics CSV. Accuracies are fractions in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub top1: f64,
    pub top5: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.8},{:.8},{:.6},{:.6}",
            self.epoch, self.lr, self.train_loss, self.top1, self.top5
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed metrics row `{line}`"));
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 5 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(Self {
            epoch: f[0].parse().map_err(|_| bad())?,
            lr: num(f[1])?,
            train_loss: num(f[2])?,
            top1: num(f[3])?,
            top5: num(f[4])?,
        })
    }
}

pub fn render_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.to_csv());
    }
    s
}

pub fn write_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    write_atomic(path, render_csv(rows).as_bytes())
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Config(format!("{} lacks the `{CSV_HEADER}` header", path.display())));
    }
    lines.filter(|l| !l.trim().is_empty()).map(MetricsRow::parse).collect()
}
