use std::path::Path;

use rand::seq::SliceRandom;

use super::backbone::TinyBackbone;
use super::metrics::{cross_entropy, evaluate_topk};
use super::optim::TrainState;
use super::synth::{generate_synth, Dataset};
use crate::blocks::BnMode;
use crate::error::{Error, Result};
use crate::io::config::ExperimentConfig;
use crate::io::fsutil::{write_atomic, OutputLock};
use crate::io::metrics::{write_csv, MetricsRow};
use crate::random;
use crate::tensor::DenseArray;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.snl";
pub const CONFIG_FILE: &str = "config.json";

const EVAL_CHUNK: usize = 250;

/// Independent seed for a named stream of a run (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_INIT: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_TEST: u64 = 3;
const STREAM_SHUFFLE: u64 = 1000;

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<MetricsRow>,
    pub model: TinyBackbone,
    /// Mean loss of the very first mini-batch, before any update.
    pub first_batch_loss: Option<f64>,
}

/// Splits of the synthetic task for a run seed.
pub fn datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    Ok((
        generate_synth(&cfg.task, cfg.task.train_size, derive_seed(cfg.seed, STREAM_TRAIN))?,
        generate_synth(&cfg.task, cfg.task.test_size, derive_seed(cfg.seed, STREAM_TEST))?,
    ))
}

pub fn init_model(cfg: &ExperimentConfig) -> Result<TinyBackbone> {
    TinyBackbone::init(cfg.backbone(), &mut random::rng(derive_seed(cfg.seed, STREAM_INIT)))
}

/// Top-1 and top-5 (or top-`classes` if fewer) accuracy in inference mode.
pub fn evaluate(model: &TinyBackbone, data: &Dataset, parallel: bool) -> Result<(f64, f64)> {
    let classes = model.cfg.classes;
    let mut logits = Vec::with_capacity(data.len() * classes);
    for chunk in data.images.chunks(EVAL_CHUNK) {
        let refs: Vec<&DenseArray> = chunk.iter().collect();
        logits.extend_from_slice(model.forward(&refs, BnMode::Inference, parallel)?.logits.data());
    }
    let logits = DenseArray::matrix(data.len(), classes, logits)?;
    Ok((
        evaluate_topk(&logits, &data.labels, 1)?,
        evaluate_topk(&logits, &data.labels, 5.min(classes))?,
    ))
}

fn save_checkpoint(model: &TinyBackbone, dir: &Path) -> Result<()> {
    model.to_checkpoint()?.save(&dir.join(CHECKPOINT_FILE))
}

/// Trains per `cfg`, calling `on_epoch` after each epoch. With `out`, the
/// directory is locked and the config, metrics CSV and checkpoint are
/// rewritten atomically every epoch; a non-finite loss or gradient aborts
/// with the last good checkpoint left in place.
pub fn train_with(
    cfg: &ExperimentConfig,
    out: Option<&Path>,
    mut on_epoch: impl FnMut(&MetricsRow),
) -> Result<TrainReport> {
    cfg.validate()?;
    let _lock = out.map(OutputLock::acquire).transpose()?;
    let parallel = !cfg.strict_deterministic;
    let (train_set, test_set) = datasets(cfg)?;
    let mut model = init_model(cfg)?;
    let mut state = TrainState::new(
        &model.params().into_iter().map(|(_, t)| t).collect::<Vec<_>>(),
        cfg.optim.clone(),
        cfg.seed,
    );
    if let Some(dir) = out {
        write_atomic(&dir.join(CONFIG_FILE), cfg.to_json().as_bytes())?;
        write_csv(&dir.join(METRICS_FILE), &[])?;
        save_checkpoint(&model, dir)?;
    }
    let n = train_set.len();
    let bs = cfg.optim.batch_size;
    let mut history = Vec::with_capacity(cfg.optim.epochs);
    let mut first_batch_loss = None;
    for epoch in 1..=cfg.optim.epochs {
        let lr = cfg.optim.lr_at(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut random::rng(derive_seed(cfg.seed, STREAM_SHUFFLE + epoch as u64)));
        let mut losses = vec![0.0; n];
        for batch in order.chunks(bs) {
            let refs: Vec<&DenseArray> = batch.iter().map(|&i| &train_set.images[i]).collect();
            let cache = model.forward(&refs, BnMode::Train, parallel)?;
            let classes = model.cfg.classes;
            let mut dlogits = DenseArray::zeros(&[batch.len(), classes]);
            let scale = 1.0 / batch.len() as f64;
            for (r, &i) in batch.iter().enumerate() {
                let label = train_set.labels[i];
                let (loss, p) = cross_entropy(cache.logits.row(r), label);
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "training loss at epoch {epoch}, sample {i}; last good checkpoint kept"
                    )));
                }
                losses[i] = loss;
                let row = dlogits.row_mut(r);
                for (d, pv) in row.iter_mut().zip(&p) {
                    *d = pv * scale;
                }
                row[label] -= scale;
            }
            if first_batch_loss.is_none() {
                first_batch_loss = Some(batch.iter().map(|&i| losses[i]).sum::<f64>() * scale);
            }
            let grads = model.backward(&cache, &dlogits, parallel)?;
            model.update_running_stats(&cache);
            state
                .sgd_step(model.params_mut(), &grads, lr)
                .map_err(|e| Error::NonFinite(format!("{e}; last good checkpoint kept")))?;
        }
        let train_loss = losses.iter().sum::<f64>() / n as f64;
        let (top1, top5) = evaluate(&model, &test_set, parallel)?;
        let row = MetricsRow {
            epoch,
            lr,
            train_loss,
            top1,
            top5,
        };
        history.push(row);
        if let Some(dir) = out {
            write_csv(&dir.join(METRICS_FILE), &history)?;
            save_checkpoint(&model, dir)?;
        }
        on_epoch(&row);
    }
    Ok(TrainReport {
        history,
        model,
        first_batch_loss,
    })
}

pub fn train(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<TrainReport> {
    train_with(cfg, out, |_| {})
}
