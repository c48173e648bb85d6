//! JSON experiment configuration. Every field is optional; unknown keys are
//! rejected and every range is checked at parse time.
//!
//! ```json
//! {
//!   "variant": "SNL",
//!   "cs": 8,
//!   "kernel": "embedded-gaussian",
//!   "order": 2,
//!   "stage": 1,
//!   "task": { "height": 8, "width": 32, "noise": 0.3 },
//!   "optim": { "epochs": 30, "lr": 0.05, "milestones": [15, 25] },
//!   "seed": 0,
//!   "output_dir": "runs/snl-0",
//!   "strict_deterministic": true
//! }
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::affinity::Kernel;
use crate::blocks::Variant;
use crate::error::{Error, Result};
use crate::train::{BackboneConfig, BlockSpec, OptimConfig, SynthTask, WIDTHS};

mod variant_choice {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<Variant>, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(v.map_or("none", Variant::name))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<Variant>, D::Error> {
        let s = String::deserialize(d)?;
        if s.eq_ignore_ascii_case("none") {
            return Ok(None);
        }
        s.parse::<Variant>().map(Some).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Block variant, or `"none"` for the plain backbone.
    #[serde(with = "variant_choice")]
    pub variant: Option<Variant>,
    /// Must equal the width of the insertion stage when given.
    pub c1: Option<usize>,
    /// Defaults to half the stage width.
    pub cs: Option<usize>,
    pub kernel: Kernel,
    pub order: usize,
    pub stage: usize,
    pub allow_indefinite: bool,
    pub task: SynthTask,
    pub optim: OptimConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub strict_deterministic: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            variant: Some(Variant::Snl),
            c1: None,
            cs: None,
            kernel: Kernel::EmbeddedGaussian,
            order: 2,
            stage: 1,
            allow_indefinite: false,
            task: SynthTask::default(),
            optim: OptimConfig::default(),
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            strict_deterministic: false,
        }
    }
}

/// 1-based line of the first occurrence of `"key"` in `text`.
fn line_of_key(text: &str, key: &str) -> Option<usize> {
    let needle = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&needle)).map(|i| i + 1)
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate().map_err(|e| match e {
            Error::Config(msg) => {
                let key = msg.split_whitespace().next().unwrap_or_default();
                let leaf = key.rsplit('.').next().unwrap_or(key);
                match line_of_key(text, leaf) {
                    Some(line) => Error::Config(format!("config: {msg} (line {line})")),
                    None => Error::Config(format!("config: {msg}")),
                }
            }
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Usage(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn stage_width(&self) -> usize {
        WIDTHS[self.stage.clamp(1, 3) - 1]
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        if !(1..=3).contains(&self.stage) {
            return err(format!("stage must be 1, 2 or 3 (got {})", self.stage));
        }
        let width = self.stage_width();
        if let Some(c1) = self.c1 {
            if c1 != width {
                return err(format!("c1 ({c1}) must equal the stage-{} width {width}", self.stage));
            }
        }
        if let Some(cs) = self.cs {
            if cs == 0 || cs > width {
                return err(format!("cs must be in 1..={width} (got {cs})"));
            }
        }
        if self.order == 0 || self.order > 16 {
            return err(format!("order must be in 1..=16 (got {})", self.order));
        }
        if self.variant.is_some_and(|v| v != Variant::Snl) && self.order != 2 {
            return err(format!("order must be 2 for {}", self.variant.unwrap()));
        }
        if self.task.train_size == 0 || self.task.test_size == 0 {
            return err("task.train_size and task.test_size must be at least 1".into());
        }
        self.task.validate()?;
        self.optim.validate()?;
        self.backbone().validate()
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            height: self.task.height,
            width: self.task.width,
            classes: self.task.classes,
            stage: self.stage,
            block: self.variant.map(|variant| BlockSpec {
                variant,
                cs: self.cs.unwrap_or((self.stage_width() / 2).max(1)),
                kernel: self.kernel,
                order: self.order,
                allow_indefinite: self.allow_indefinite,
            }),
        }
    }
}
