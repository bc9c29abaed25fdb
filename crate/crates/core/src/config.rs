//! Experiment configuration, loaded from JSON.
//!
//! Every section has defaults, so `{}` is a valid config. Unknown keys are
//! rejected at every level.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentPolicy;
use crate::data::SyntheticSpec;
use crate::encoder::EncoderSpec;
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    OneClass,
    Ssad,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::OneClass => "one-class",
            Mode::Ssad => "ssad",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one-class" => Ok(Mode::OneClass),
            "ssad" => Ok(Mode::Ssad),
            other => Err(invalid(format!("unknown mode `{other}`"))),
        }
    }
}

/// Operand of the variance regularizer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceMode {
    /// Variance across the feature dimensions of each retrieved vector.
    #[default]
    PerSample,
    /// Per-dimension variance across the normal rows of the batch.
    Batch,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemoryInit {
    /// Each prototype drawn uniformly on the unit sphere.
    #[default]
    UnitSphere,
    /// One unit-sphere draw copied into every prototype slot.
    Repeated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemoryConfig {
    /// Prototype count per scale, first scale first.
    pub sizes: Vec<usize>,
    pub beta: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub init: MemoryInit,
    /// Norm of every initial prototype.
    pub init_scale: f64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            sizes: vec![64, 32],
            beta: 2.0,
            tol: 1e-4,
            max_iters: 16,
            init: MemoryInit::UnitSphere,
            init_scale: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda_v: f64,
    /// Margin of the double-hinge distance loss.
    pub margin: f64,
    /// Scale weights follow `base^(s-1)`.
    pub scale_weight_base: f64,
    /// Spatial sampling ratio per scale.
    pub ratios: Vec<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            lambda_v: 0.05,
            margin: 2.0,
            scale_weight_base: 2.0,
            ratios: vec![0.3, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_max: 0.01,
            lr_min: 0.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 15,
            batch_size: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Hidden width of each scale head.
    pub hidden: usize,
    /// Pooling grid side for intermediate scales; the last scale always
    /// pools globally.
    pub pool_grid: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            lr_max: 0.01,
            lr_min: 0.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 40,
            batch_size: 64,
            hidden: 64,
            pool_grid: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub normal_class: u32,
    pub gamma: f64,
    pub seeds: Vec<u64>,
    /// Normal training images; `None` takes every normal not held out.
    pub train_normals: Option<usize>,
    /// Held-out normals and held-out anomalies, each.
    pub test_per_class: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            normal_class: 0,
            gamma: 0.0,
            seeds: vec![0, 1, 2, 3, 4],
            train_normals: Some(500),
            test_per_class: 100,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<String>,
    pub checkpoint: Option<String>,
    pub telemetry: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Flags {
    pub variance_mode: VarianceMode,
    pub normalize_before_memory: bool,
    /// Reserved; must stay false.
    pub use_projection_head: bool,
    /// Gate branch A through the memories. Off gives the plain two-view
    /// contrastive baseline.
    pub use_memory: bool,
    /// Train and score on the last scale only.
    pub single_scale: bool,
}

impl Default for Flags {
    fn default() -> Self {
        Self {
            variance_mode: VarianceMode::PerSample,
            normalize_before_memory: true,
            use_projection_head: false,
            use_memory: true,
            single_scale: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub mode: Mode,
    pub encoder: EncoderSpec,
    pub memory: MemoryConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub stage2: Stage2Config,
    pub augment: AugmentPolicy,
    pub data: SyntheticSpec,
    pub protocol: ProtocolConfig,
    pub paths: Paths,
    pub flags: Flags,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: Mode::OneClass,
            encoder: EncoderSpec::default(),
            memory: MemoryConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            stage2: Stage2Config::default(),
            augment: AugmentPolicy::default(),
            data: SyntheticSpec::default(),
            protocol: ProtocolConfig::default(),
            paths: Paths::default(),
            flags: Flags::default(),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(format!("{name} must be positive, got {v}")))
    }
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(invalid(format!("{name} must be non-negative, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> [u8; 32] {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&canonical).into()
    }

    /// Number of feature scales produced by the encoder.
    pub fn num_scales(&self) -> usize {
        self.encoder.stages.len()
    }

    /// Scale indices (0-based) that carry a memory, a loss term and a score.
    pub fn active_scales(&self) -> Vec<usize> {
        let s = self.num_scales();
        if self.flags.single_scale {
            vec![s - 1]
        } else {
            (0..s).collect()
        }
    }

    /// `λ^(s) = base^(s-1)` for every encoder scale.
    pub fn scale_weights(&self) -> Vec<f64> {
        (0..self.num_scales())
            .map(|s| self.loss.scale_weight_base.powi(s as i32))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.augment.validate()?;
        self.data.validate()?;
        let s = self.num_scales();

        let m = &self.memory;
        if m.sizes.len() != s {
            return Err(invalid(format!("memory.sizes needs {s} entries, got {}", m.sizes.len())));
        }
        if m.sizes.contains(&0) {
            return Err(invalid("memory sizes must be >= 1"));
        }
        positive("memory.beta", m.beta)?;
        positive("memory.tol", m.tol)?;
        positive("memory.init_scale", m.init_scale)?;
        if m.max_iters == 0 {
            return Err(invalid("memory.max_iters must be >= 1"));
        }

        let l = &self.loss;
        positive("loss.tau", l.tau)?;
        non_negative("loss.lambda_v", l.lambda_v)?;
        positive("loss.margin", l.margin)?;
        if !(l.scale_weight_base.is_finite() && l.scale_weight_base > 1.0) {
            return Err(invalid("loss.scale_weight_base must exceed 1 so weights increase with scale"));
        }
        if l.ratios.len() != s {
            return Err(invalid(format!("loss.ratios needs {s} entries, got {}", l.ratios.len())));
        }
        if l.ratios.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
            return Err(invalid("sampling ratios must lie in (0, 1]"));
        }

        for (name, o) in [("optim", &self.optim.as_stage()), ("stage2", &self.stage2.as_stage())] {
            positive(&format!("{name}.lr_max"), o.lr_max)?;
            non_negative(&format!("{name}.lr_min"), o.lr_min)?;
            if o.lr_min > o.lr_max {
                return Err(invalid(format!("{name}.lr_min exceeds lr_max")));
            }
            if !(0.0..1.0).contains(&o.momentum) {
                return Err(invalid(format!("{name}.momentum must lie in [0, 1)")));
            }
            non_negative(&format!("{name}.weight_decay"), o.weight_decay)?;
            if o.batch_size == 0 {
                return Err(invalid(format!("{name}.batch_size must be >= 1")));
            }
        }
        if self.stage2.hidden == 0 || self.stage2.pool_grid == 0 {
            return Err(invalid("stage2.hidden and stage2.pool_grid must be >= 1"));
        }

        let p = &self.protocol;
        if !(0.0..1.0).contains(&p.gamma) {
            return Err(invalid(format!("protocol.gamma must lie in [0, 1), got {}", p.gamma)));
        }
        if p.seeds.is_empty() {
            return Err(invalid("protocol.seeds must not be empty"));
        }
        if p.test_per_class == 0 {
            return Err(invalid("protocol.test_per_class must be >= 1"));
        }
        if self.flags.use_projection_head {
            return Err(invalid("flags.use_projection_head is reserved and must be false"));
        }
        Ok(())
    }
}

/// Optimizer knobs shared by both stages.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageOptim {
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl OptimConfig {
    pub fn as_stage(&self) -> StageOptim {
        StageOptim {
            lr_max: self.lr_max,
            lr_min: self.lr_min,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            batch_size: self.batch_size,
        }
    }
}

impl Stage2Config {
    pub fn as_stage(&self) -> StageOptim {
        StageOptim {
            lr_max: self.lr_max,
            lr_min: self.lr_min,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            batch_size: self.batch_size,
        }
    }
}
