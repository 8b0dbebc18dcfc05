//! Run configuration files (TOML).
//!
//! ```toml
//! backbone = "tiny"
//! strategy = "RS"
//! setting = "RGB"
//! seed = 7
//! output_dir = "runs/rs"
//!
//! [train]
//! epochs = 30
//!
//! [[tasks]]
//! name = "objects"
//! synth = { num_classes = 6, samples_per_class = 80, image_size = 24, task_kind = "classification" }
//!
//! [[tasks]]
//! name = "linemod"
//! manifest = "data/linemod/manifest.jsonl"
//! split = { protocol = "linemod", seed = 0 }
//! ```
//!
//! Relative paths resolve against the configuration file's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::split::split_from_ids;
use crate::data::{
    linemod_split, load_dataset, nyu_class_remap, parse_split_file, rod_split, Dataset, LeaveOut, SampleManifest,
    SynthSpec,
};
use crate::error::{Error, Result};
use crate::harness::desk::{pretrained_backbone, synth_split_with, DESK_IMAGE_SIZE, TEST_FRACTION};
use crate::harness::{RunPlan, TaskData, TrainConfig};
use crate::model::{Backbone, BackboneSpec, ParamSet, Setting, StrategyKind, StrategyOptions, TaskKind, TaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    /// Backbone preset: `tiny` or `resnet18`.
    pub backbone: String,
    /// Pretrained backbone weights file.
    #[serde(default)]
    pub weights: Option<PathBuf>,
    /// Synthetic source training for a backbone without weights.
    #[serde(default)]
    pub pretrain: Option<PretrainConfig>,
    /// Square input side; defaults to 24 for `tiny` and 224 for `resnet18`.
    #[serde(default)]
    pub image_size: Option<usize>,
    pub strategy: StrategyKind,
    pub setting: Setting,
    /// Leaderboard name of the run; defaults to the strategy code.
    #[serde(default)]
    pub method: Option<String>,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub options: StrategyOptions,
    /// Overrides of the training defaults; `seed` here is replaced by the
    /// top-level seed.
    #[serde(default)]
    pub train: TrainConfig,
    pub tasks: Vec<TaskEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub source: SynthSpec,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub name: String,
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub synth: Option<SynthSpec>,
    #[serde(default)]
    pub split: Option<SplitConfig>,
    /// Collapse the labels to the nine most frequent training classes plus
    /// `other`.
    #[serde(default)]
    pub remap_top_classes: bool,
    /// Seeds the synthetic generator and the head; defaults to the task's
    /// position plus one.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub mask_learning_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "protocol", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitConfig {
    /// Whole instances held out per class; every fifth frame kept.
    Rod {
        #[serde(default)]
        seed: u64,
        /// Class → held-out instance, instead of a seeded draw.
        #[serde(default)]
        leave_out: Option<BTreeMap<String, String>>,
    },
    /// 20% of each class's frames held out.
    Linemod {
        #[serde(default)]
        seed: u64,
    },
    /// Explicit id lists, one per line.
    Files { train: PathBuf, test: PathBuf },
    /// The trailing fraction of the samples (synthetic tasks only).
    Holdout { test_fraction: f64 },
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        BackboneSpec::preset(&self.backbone, 3).map_err(config_err)?;
        self.options.validate().map_err(config_err)?;
        self.train.validate().map_err(config_err)?;
        if self.image_size == Some(0) {
            return Err(Error::Config("image_size must be positive".into()));
        }
        if self.weights.is_some() && self.pretrain.is_some() {
            return Err(Error::Config("give either `weights` or `pretrain`, not both".into()));
        }
        if let Some(p) = &self.pretrain {
            p.source.validate().map_err(config_err)?;
            if p.source.task_kind != TaskKind::Classification {
                return Err(Error::Config("pretraining source must be a classification task".into()));
            }
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("at least one task is required".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for t in &self.tasks {
            if !names.insert(&t.name) {
                return Err(Error::Config(format!("duplicate task `{}`", t.name)));
            }
            match (&t.manifest, &t.synth) {
                (Some(_), None) => {
                    if matches!(t.split, None | Some(SplitConfig::Holdout { .. })) {
                        return Err(Error::Config(format!(
                            "task `{}`: manifest tasks need a rod, linemod or files split",
                            t.name
                        )));
                    }
                }
                (None, Some(spec)) => {
                    spec.validate().map_err(config_err)?;
                    if !matches!(t.split, None | Some(SplitConfig::Holdout { .. })) {
                        return Err(Error::Config(format!("task `{}`: synthetic tasks use a holdout split", t.name)));
                    }
                    if t.remap_top_classes {
                        return Err(Error::Config(format!("task `{}`: remapping needs a manifest", t.name)));
                    }
                }
                _ => {
                    return Err(Error::Config(format!(
                        "task `{}` needs exactly one of `manifest` and `synth`",
                        t.name
                    )))
                }
            }
            if let Some(lr) = t.mask_learning_rate {
                if !(lr.is_finite() && lr > 0.0) {
                    return Err(Error::Config(format!("task `{}`: mask_learning_rate must be positive", t.name)));
                }
            }
        }
        Ok(())
    }

    pub fn image_size(&self) -> usize {
        self.image_size.unwrap_or(match self.backbone.as_str() {
            "resnet18" => 224,
            _ => DESK_IMAGE_SIZE,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Loads every dataset and builds the backbone. `base` is the directory
    /// relative paths are resolved against.
    pub fn build_plan(&self, base: &Path) -> Result<RunPlan> {
        let size = self.image_size();
        let tasks = self
            .tasks
            .iter()
            .enumerate()
            .map(|(i, t)| self.load_task(t, i, base, size))
            .collect::<Result<Vec<_>>>()?;
        Ok(RunPlan {
            strategy: self.strategy,
            setting: self.setting,
            backbone: self.build_backbone(base)?,
            options: self.options.clone(),
            train: self.train_config(),
            tasks,
        })
    }

    fn build_backbone(&self, base: &Path) -> Result<Backbone> {
        let spec = BackboneSpec::preset(&self.backbone, 3)?;
        if let Some(w) = &self.weights {
            let path = base.join(w);
            let file = std::fs::File::open(&path).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::DatasetMissing(path.clone()),
                _ => Error::Io(e),
            })?;
            let params = ParamSet::read_from(std::io::BufReader::new(file))?;
            return Backbone::from_params_for_setting(self.setting, &spec, params);
        }
        if let Some(p) = &self.pretrain {
            if self.backbone != "tiny" {
                return Err(Error::Config("synthetic pretraining is only offered for the tiny preset".into()));
            }
            let cfg = TrainConfig {
                epochs: p.epochs,
                lr_decay_epoch: p.epochs.saturating_sub(1),
                ..self.train_config()
            };
            return pretrained_backbone(self.setting, &p.source, self.seed, &cfg);
        }
        log::warn!("no weights or pretraining given: using a randomly initialized backbone");
        Backbone::for_setting(self.setting, &spec, self.seed)
    }

    fn load_task(&self, t: &TaskEntry, index: usize, base: &Path, size: usize) -> Result<TaskData> {
        let seed = t.seed.unwrap_or(index as u64 + 1);
        let (train, test) = match (&t.manifest, &t.synth) {
            (None, Some(spec)) => {
                let fraction = match t.split {
                    Some(SplitConfig::Holdout { test_fraction }) => test_fraction,
                    _ => TEST_FRACTION,
                };
                let spec = SynthSpec {
                    image_size: size,
                    ..spec.clone()
                };
                synth_split_with(seed, &spec, self.setting, fraction)?
            }
            (Some(path), None) => {
                let path = base.join(path);
                let manifest = SampleManifest::load(&path)?;
                let root = manifest.data_root(&path);
                let (train_m, test_m) = split_manifest(&manifest, t.split.as_ref(), base)?;
                let (train_m, test_m) = if t.remap_top_classes {
                    let labels: Vec<&str> = train_m.records.iter().map(|r| r.class_label.as_str()).collect();
                    let remap = nyu_class_remap(&labels)?;
                    (remap.apply(&train_m)?, remap.apply(&test_m)?)
                } else {
                    (train_m, test_m)
                };
                (
                    load_dataset(&train_m, &root, self.setting, size)?,
                    load_dataset(&test_m, &root, self.setting, size)?,
                )
            }
            _ => unreachable!("validated"),
        };
        Ok(TaskData {
            spec: task_spec(&t.name, &train, seed),
            train,
            test,
            mask_learning_rate: t.mask_learning_rate,
        })
    }
}

fn task_spec(name: &str, data: &Dataset, seed: u64) -> TaskSpec {
    TaskSpec {
        name: name.to_owned(),
        kind: data.kind,
        num_classes: data.num_classes(),
        seed,
    }
}

fn split_manifest(
    m: &SampleManifest,
    split: Option<&SplitConfig>,
    base: &Path,
) -> Result<(SampleManifest, SampleManifest)> {
    let s = match split {
        Some(SplitConfig::Rod { seed, leave_out }) => {
            let lo = match leave_out {
                Some(map) => LeaveOut::Explicit(map.clone()),
                None => LeaveOut::Seeded(*seed),
            };
            rod_split(m, &lo)?
        }
        Some(SplitConfig::Linemod { seed }) => linemod_split(m, *seed)?,
        Some(SplitConfig::Files { train, test }) => {
            let read = |p: &PathBuf| -> Result<Vec<String>> {
                let path = base.join(p);
                let text = std::fs::read_to_string(&path).map_err(|e| match e.kind() {
                    std::io::ErrorKind::NotFound => Error::DatasetMissing(path.clone()),
                    _ => Error::Io(e),
                })?;
                parse_split_file(&text)
            };
            split_from_ids(m, &read(train)?, &read(test)?)?
        }
        Some(SplitConfig::Holdout { .. }) | None => unreachable!("validated"),
    };
    Ok((s.train, s.test))
}
