//! Synthetic two-motif classification task.
//!
//! Each single-channel image holds two `s × s` ±1 motifs `a` and `b`, drawn
//! from a fixed bank, on a noisy background. The label is `(a + b) mod classes`:
//! neither motif alone carries any information about it, and the two are
//! placed at least `min_separation` columns apart. With `aligned`, motif
//! corners sit on odd coordinates, so each motif fills exactly one window of
//! a stride-2, padding-1, 3×3 convolution.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::random;
use crate::tensor::DenseArray;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthTask {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub motif_size: usize,
    /// Minimum column distance between the two motifs' left edges.
    pub min_separation: usize,
    /// Standard deviation of the Gaussian background.
    pub noise: f64,
    /// Seed of the motif bank; shared by train and test splits.
    pub task_seed: u64,
    pub aligned: bool,
    pub train_size: usize,
    pub test_size: usize,
}

impl Default for SynthTask {
    fn default() -> Self {
        Self {
            height: 8,
            width: 32,
            classes: 10,
            motif_size: 3,
            min_separation: 17,
            noise: 0.3,
            task_seed: 0,
            aligned: true,
            train_size: 8000,
            test_size: 2000,
        }
    }
}

impl SynthTask {
    pub fn validate(&self) -> Result<()> {
        let s = self.motif_size;
        if self.classes < 2 {
            return Err(Error::Config("task.classes must be at least 2".into()));
        }
        if s == 0 || s > self.height || s > self.width {
            return Err(Error::Config(format!(
                "task.motif_size {s} does not fit a {}x{} image",
                self.height, self.width
            )));
        }
        let (rows, cols) = self.corner_ranges();
        let span = |r: &[usize]| r.last().zip(r.first()).map(|(hi, lo)| hi - lo);
        if span(&rows).is_none() || span(&cols).is_none_or(|d| d < self.min_separation) {
            return Err(Error::Config(format!(
                "task.min_separation {} cannot be met in a {}x{} image with motif size {s}{}",
                self.min_separation,
                self.height,
                self.width,
                if self.aligned { " and aligned corners" } else { "" }
            )));
        }
        if s * s < 64 && (1u64 << (s * s)) < self.classes as u64 {
            return Err(Error::Config("task.motif_size too small for the number of distinct motifs".into()));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::Config("task.noise must be a finite non-negative number".into()));
        }
        Ok(())
    }

    /// The motif bank: `classes` distinct ±1 patterns, flattened row-major.
    pub fn motifs(&self) -> Vec<Vec<f64>> {
        let mut rng = random::rng(self.task_seed);
        let cells = self.motif_size * self.motif_size;
        let mut bank: Vec<Vec<f64>> = Vec::with_capacity(self.classes);
        while bank.len() < self.classes {
            let m: Vec<f64> = (0..cells).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
            if !bank.contains(&m) {
                bank.push(m);
            }
        }
        bank
    }

    /// Admissible top-left rows and columns.
    pub fn corner_ranges(&self) -> (Vec<usize>, Vec<usize>) {
        let range = |extent: usize| -> Vec<usize> {
            let last = match extent.checked_sub(self.motif_size) {
                Some(l) => l,
                None => return Vec::new(),
            };
            (0..=last).filter(|v| !self.aligned || v % 2 == 1).collect()
        };
        (range(self.height), range(self.width))
    }

    pub fn label_of(&self, a: usize, b: usize) -> usize {
        (a + b) % self.classes
    }
}

/// Top-left corners of the two motifs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub a: (usize, usize),
    pub b: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    /// `(height·width, 1)` maps, row-major positions.
    pub images: Vec<DenseArray>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Draws both corners; `a` and `b` are equally likely to be the left motif.
pub fn sample_placement(task: &SynthTask, rng: &mut impl Rng) -> Placement {
    let (rows, cols) = task.corner_ranges();
    loop {
        let (ca, cb) = (*cols.choose(rng).unwrap(), *cols.choose(rng).unwrap());
        if ca.abs_diff(cb) >= task.min_separation {
            return Placement {
                a: (*rows.choose(rng).unwrap(), ca),
                b: (*rows.choose(rng).unwrap(), cb),
            };
        }
    }
}

/// Renders motifs `a` and `b` at `place` onto `background`.
pub fn render(task: &SynthTask, bank: &[Vec<f64>], a: usize, b: usize, place: Placement, background: &[f64]) -> DenseArray {
    let (w, s) = (task.width, task.motif_size);
    let mut img = background.to_vec();
    for (motif, (r0, c0)) in [(a, place.a), (b, place.b)] {
        for dr in 0..s {
            for dc in 0..s {
                img[(r0 + dr) * w + c0 + dc] += bank[motif][dr * s + dc];
            }
        }
    }
    DenseArray::matrix(task.height * w, 1, img).expect("image size")
}

/// `n` samples with labels assigned round-robin, so every class appears
/// `⌊n/classes⌋` or `⌈n/classes⌉` times. Same `(task, n, seed)` gives the same bytes.
pub fn generate_synth(task: &SynthTask, n: usize, seed: u64) -> Result<Dataset> {
    task.validate()?;
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    let bank = task.motifs();
    let mut rng = random::rng(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % task.classes).collect();
    labels.shuffle(&mut rng);
    let pixels = task.height * task.width;
    let images = labels
        .iter()
        .map(|&label| {
            let a = rng.gen_range(0..task.classes);
            let b = (label + task.classes - a) % task.classes;
            let place = sample_placement(task, &mut rng);
            let background: Vec<f64> = (0..pixels)
                .map(|_| task.noise * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect();
            render(task, &bank, a, b, place, &background)
        })
        .collect();
    Ok(Dataset {
        height: task.height,
        width: task.width,
        images,
        labels,
    })
}
