//! Pinned desk-scale benchmark: a tiny backbone pretrained on a synthetic
//! source task, followed by three synthetic target tasks.

use crate::adapters::attach;
use crate::data::{synth_task, Dataset, Difficulty, SynthSpec};
use crate::error::{Error, Result};
use crate::model::{Backbone, BackboneSpec, Setting, StrategyKind, StrategyOptions, TaskKind, TaskSpec};

use super::{train_task, RunPlan, TaskData, TrainConfig};

pub const DESK_IMAGE_SIZE: usize = 24;
pub const DESK_SEED: u64 = 7;

/// Fraction of each synthetic task held out for testing.
pub const TEST_FRACTION: f64 = 0.3;

pub fn desk_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 30,
        batch_size: 16,
        learning_rate: 0.02,
        lr_decay_epoch: 20,
        mask_learning_rate: 5e-4,
        pose_loss_weight: 10.0,
        seed: DESK_SEED,
        ..TrainConfig::default()
    }
}

/// Short source training: the backbone is useful but leaves room for
/// task-specific parameters.
pub const DESK_PRETRAIN_EPOCHS: usize = 3;

pub fn pretrain_spec() -> SynthSpec {
    SynthSpec {
        num_classes: 8,
        samples_per_class: 40,
        image_size: DESK_IMAGE_SIZE,
        task_kind: TaskKind::Classification,
        difficulty: Difficulty::Hard,
    }
}

/// The three target tasks: (name, generator seed, spec).
pub fn desk_task_specs() -> Vec<(&'static str, u64, SynthSpec)> {
    vec![
        (
            "objects",
            101,
            SynthSpec {
                num_classes: 6,
                samples_per_class: 80,
                image_size: DESK_IMAGE_SIZE,
                task_kind: TaskKind::Classification,
                difficulty: Difficulty::Hard,
            },
        ),
        (
            "poses",
            202,
            SynthSpec {
                num_classes: 3,
                samples_per_class: 200,
                image_size: DESK_IMAGE_SIZE,
                task_kind: TaskKind::Pose,
                difficulty: Difficulty::Easy,
            },
        ),
        (
            "scenes",
            303,
            SynthSpec {
                num_classes: 8,
                samples_per_class: 60,
                image_size: DESK_IMAGE_SIZE,
                task_kind: TaskKind::Classification,
                difficulty: Difficulty::Hard,
            },
        ),
    ]
}

/// Generates a synthetic task and holds out its last `TEST_FRACTION`.
pub fn synth_split(seed: u64, spec: &SynthSpec, setting: Setting) -> Result<(Dataset, Dataset)> {
    synth_split_with(seed, spec, setting, TEST_FRACTION)
}

/// Samples cycle through the classes, so a tail holding a multiple of the
/// class count is balanced.
pub fn synth_split_with(seed: u64, spec: &SynthSpec, setting: Setting, test_fraction: f64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidValue(format!("test fraction must be in (0, 1), got {test_fraction}")));
    }
    let data = synth_task(seed, spec)?;
    let all = data.to_dataset(&data.manifest, setting, spec.image_size)?;
    let n_test = ((all.len() as f64) * test_fraction).round() as usize;
    let n_test = (n_test - n_test % spec.num_classes).max(spec.num_classes);
    if n_test >= all.len() {
        return Err(Error::Split(format!("{} samples are too few to hold out a test split", all.len())));
    }
    let cut = all.len() - n_test;
    let mut train = all.clone();
    let test_samples = train.samples.split_off(cut);
    let test = Dataset {
        samples: test_samples,
        ..all
    };
    Ok((train, test))
}

pub fn desk_tasks(setting: Setting) -> Result<Vec<TaskData>> {
    desk_task_specs()
        .into_iter()
        .enumerate()
        .map(|(i, (name, seed, spec))| {
            let (train, test) = synth_split(seed, &spec, setting)?;
            Ok(TaskData {
                spec: TaskSpec {
                    name: name.to_owned(),
                    kind: spec.task_kind,
                    num_classes: spec.num_classes,
                    seed: DESK_SEED + i as u64,
                },
                train,
                test,
                mask_learning_rate: None,
            })
        })
        .collect()
}

/// Tiny backbone fine-tuned on the pinned synthetic source task.
pub fn desk_backbone(setting: Setting) -> Result<Backbone> {
    let cfg = TrainConfig {
        epochs: DESK_PRETRAIN_EPOCHS,
        lr_decay_epoch: DESK_PRETRAIN_EPOCHS - 1,
        ..desk_train_config()
    };
    pretrained_backbone(setting, &pretrain_spec(), DESK_SEED, &cfg)
}

/// Tiny backbone fine-tuned on a synthetic source task (standing in for
/// large-scale pretraining), with batch-norm statistics recalibrated on the
/// source data.
pub fn pretrained_backbone(setting: Setting, source: &SynthSpec, seed: u64, cfg: &TrainConfig) -> Result<Backbone> {
    let spec = BackboneSpec::tiny(3);
    let random = Backbone::for_setting(setting, &spec, seed)?;
    let (train, test) = synth_split(seed, source, setting)?;
    let calib: Vec<_> = chunks(&train, 32)?;
    random.calibrate_batch_norm(&calib)?;
    let task = TaskSpec {
        name: "source".into(),
        kind: source.task_kind,
        num_classes: source.num_classes,
        seed,
    };
    let mut model = attach(StrategyKind::FineTune, &random, &task, &StrategyOptions::default())?;
    let result = train_task(&mut model, &train, &test, cfg, None)?;
    log::info!("source task accuracy {:.3}", result.accuracy);
    let pretrained = Backbone::from_params(random.branches().to_vec(), model.task_specific().clone())?;
    pretrained.calibrate_batch_norm(&calib)?;
    Ok(pretrained)
}

fn chunks(data: &Dataset, size: usize) -> Result<Vec<Vec<crate::tensor::Tensor>>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    idx.chunks(size).map(|c| Ok(data.batch(c)?.inputs)).collect()
}

pub fn desk_plan(strategy: StrategyKind, setting: Setting) -> Result<RunPlan> {
    Ok(RunPlan {
        strategy,
        setting,
        backbone: desk_backbone(setting)?,
        options: StrategyOptions::default(),
        train: desk_train_config(),
        tasks: desk_tasks(setting)?,
    })
}
