//! Backbone abstraction and the shared / task-specific / head parameter
//! partition consumed by every strategy and every metric.

mod backbone;
mod network;
pub mod params;
pub mod spec;
mod task_model;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use backbone::{Backbone, Branch};
pub use network::BnStatsUpdate;
pub use params::{Param, ParamKind, ParamSet, SharedParams};
pub use spec::{BackboneLayout, BackboneSpec, BlockLayout, ConvLayer, ConvRole, StemSpec};
pub use task_model::{param_cost_bits, shared_fingerprint, ForwardOutput, ParamCost, ParamGroup, TaskModel};

/// The six task-extension strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StrategyKind {
    /// Fine-tuning: an independent copy of the whole backbone per task.
    #[serde(rename = "FT", alias = "ft")]
    FineTune,
    /// Feature extraction: frozen backbone, only the head is learned.
    #[serde(rename = "FE", alias = "fe")]
    FeatureExtractor,
    /// Residual adapters in series after each block convolution.
    #[serde(rename = "RS", alias = "rs")]
    SeriesAdapter,
    /// Residual adapters in parallel with each block convolution.
    #[serde(rename = "RP", alias = "rp")]
    ParallelAdapter,
    /// Binary masks multiplied point-wise into every convolution.
    #[serde(rename = "PB", alias = "pb")]
    Piggyback,
    /// Binary masks combined with the frozen filters through per-layer
    /// affine scalars.
    #[serde(rename = "BAT", alias = "bat")]
    Bat,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 6] = [
        StrategyKind::FineTune,
        StrategyKind::FeatureExtractor,
        StrategyKind::SeriesAdapter,
        StrategyKind::ParallelAdapter,
        StrategyKind::Piggyback,
        StrategyKind::Bat,
    ];

    pub fn code(self) -> &'static str {
        match self {
            StrategyKind::FineTune => "FT",
            StrategyKind::FeatureExtractor => "FE",
            StrategyKind::SeriesAdapter => "RS",
            StrategyKind::ParallelAdapter => "RP",
            StrategyKind::Piggyback => "PB",
            StrategyKind::Bat => "BAT",
        }
    }

    /// Strategies whose shared backbone must never change.
    pub fn freezes_backbone(self) -> bool {
        self != StrategyKind::FineTune
    }

    /// Mask strategies train their non-head parameters with Adam.
    pub fn uses_masks(self) -> bool {
        matches!(self, StrategyKind::Piggyback | StrategyKind::Bat)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.code().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidValue(format!("unknown strategy `{s}`")))
    }
}

/// Input modality of a benchmark run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Setting {
    #[serde(rename = "RGB", alias = "rgb")]
    Rgb,
    #[serde(rename = "Depth", alias = "depth")]
    Depth,
    #[serde(rename = "RGB-D", alias = "rgbd", alias = "rgb-d")]
    RgbD,
}

impl Setting {
    pub const ALL: [Setting; 3] = [Setting::Rgb, Setting::Depth, Setting::RgbD];

    pub fn label(self) -> &'static str {
        match self {
            Setting::Rgb => "RGB",
            Setting::Depth => "Depth",
            Setting::RgbD => "RGB-D",
        }
    }

    /// Backbone branch names; for RGB-D the RGB branch comes first.
    pub fn branch_names(self) -> &'static [&'static str] {
        match self {
            Setting::Rgb => &["rgb"],
            Setting::Depth => &["depth"],
            Setting::RgbD => &["rgb", "depth"],
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rgb" => Ok(Setting::Rgb),
            "depth" => Ok(Setting::Depth),
            "rgb-d" | "rgbd" => Ok(Setting::RgbD),
            _ => Err(Error::InvalidValue(format!("unknown setting `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    /// Joint class and 3-D rotation prediction.
    Pose,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub num_classes: usize,
    /// Seeds the head initialization.
    pub seed: u64,
}

impl TaskSpec {
    /// Class logits, followed by four raw quaternion outputs for pose tasks.
    pub fn output_dim(&self) -> usize {
        match self.kind {
            TaskKind::Classification => self.num_classes,
            TaskKind::Pose => self.num_classes + 4,
        }
    }
}

/// Affine family used by BAT to build task filters from the frozen ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatForm {
    /// `k0·W + k1·(M ⊙ W)`
    Affine,
    /// `k0·W + k1·(M ⊙ W) + k2·M`
    AffineMaskBias,
}

impl BatForm {
    pub fn scalar_count(self) -> usize {
        match self {
            BatForm::Affine => 2,
            BatForm::AffineMaskBias => 3,
        }
    }
}

fn default_threshold() -> f64 {
    0.005
}
fn default_mask_init() -> f64 {
    0.01
}
fn default_bat_form() -> BatForm {
    BatForm::Affine
}
fn default_bat_init() -> Vec<f64> {
    vec![1.0, 0.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyOptions {
    /// Mask threshold τ: a mask entry is 1 iff its latent is ≥ τ.
    #[serde(default = "default_threshold")]
    pub mask_threshold: f64,
    #[serde(default = "default_mask_init")]
    pub mask_init: f64,
    #[serde(default = "default_bat_form")]
    pub bat_form: BatForm,
    /// Initial BAT scalars `[k0, k1, (k2)]`; missing trailing values are 0.
    #[serde(default = "default_bat_init")]
    pub bat_init: Vec<f64>,
}

impl Default for StrategyOptions {
    fn default() -> Self {
        Self {
            mask_threshold: default_threshold(),
            mask_init: default_mask_init(),
            bat_form: default_bat_form(),
            bat_init: default_bat_init(),
        }
    }
}

impl StrategyOptions {
    pub fn validate(&self) -> Result<()> {
        if !self.mask_threshold.is_finite() || !self.mask_init.is_finite() {
            return Err(Error::InvalidValue("mask threshold and init must be finite".into()));
        }
        if self.bat_init.len() > self.bat_form.scalar_count()
            || self.bat_init.iter().any(|v| !v.is_finite())
        {
            return Err(Error::InvalidValue(format!(
                "bat_init needs at most {} finite values",
                self.bat_form.scalar_count()
            )));
        }
        Ok(())
    }

    pub(crate) fn bat_initial(&self, i: usize) -> f64 {
        self.bat_init.get(i).copied().unwrap_or(0.0)
    }
}
