use crate::error::{Error, Result};
use crate::tensor::DenseArray;

/// Fraction of rows whose label ranks among the `k` largest logits. A class
/// tied with the label outranks it only if its index is lower.
pub fn evaluate_topk(logits: &DenseArray, labels: &[usize], k: usize) -> Result<f64> {
    let classes = logits.cols();
    if k == 0 || k > classes {
        return Err(Error::Usage(format!("k must be in 1..={classes}, got {k}")));
    }
    if logits.rows() != labels.len() {
        return Err(Error::Shape {
            op: "evaluate_topk",
            left: logits.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (i, &t) in labels.iter().enumerate() {
        let row = logits.row(i);
        let lt = row[t];
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > lt || (v == lt && j < t))
            .count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

/// Per-sample cross-entropy `logsumexp(z) − z_y` and its softmax probabilities.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    let loss = m + s.ln() - logits[label];
    (loss, e.into_iter().map(|v| v / s).collect())
}
