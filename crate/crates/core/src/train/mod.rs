//! Desk-scale supervised training on the synthetic two-motif task.

mod backbone;
pub mod conv;
mod metrics;
mod optim;
mod run;
pub mod synth;

pub use backbone::{BackboneConfig, BlockSpec, ForwardCache, TinyBackbone, WIDTHS};
pub use metrics::{cross_entropy, evaluate_topk};
pub use optim::{sgd_update, OptimConfig, TrainState};
pub use run::{
    datasets, derive_seed, evaluate, init_model, train, train_with, TrainReport, CHECKPOINT_FILE, CONFIG_FILE,
    METRICS_FILE,
};
pub use synth::{generate_synth, Dataset, SynthTask};
