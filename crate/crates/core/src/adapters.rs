//! The six task-extension strategies that turn a frozen backbone into a
//! task-specific model, plus their analytical parameter accounting.
//!
//! Attachment points:
//!
//! * masks (PB, BAT) wrap every convolution, including the stem and the
//!   1×1 downsample convolutions;
//! * residual adapters (RS, RP) attach to every convolution of a residual
//!   unit (both 3×3 convolutions and the downsample), never to the stem.
//!
//! Every strategy except fine-tuning starts from the frozen backbone's exact
//! function: adapters are zero-initialized, masks start above threshold and
//! BAT starts at `k0 = 1, k1 = 0`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::params::{share, Param, ParamSet};
use crate::model::{
    param_cost_bits, BackboneSpec, Backbone, BatForm, ConvLayer, ParamCost, StrategyKind,
    StrategyOptions, TaskModel, TaskSpec,
};
use crate::tensor::Tensor;

/// Real-valued mask latents for one layer and the binarization threshold τ.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskLatent {
    pub latent: Tensor,
    pub threshold: f64,
}

/// `1` where `latent ≥ τ`, else `0`. The training graph pairs this with a
/// straight-through backward pass (see [`crate::autograd::Tape::threshold_ste`]).
pub fn binarize_mask(latent: &MaskLatent) -> Tensor {
    let tau = latent.threshold;
    latent.latent.map(|v| if v >= tau { 1.0 } else { 0.0 })
}

/// BAT's task filters `k0·W₀ + k1·(M ⊙ W₀)`.
pub fn bat_transform(base: &Tensor, mask: &Tensor, k0: f64, k1: f64) -> Result<Tensor> {
    if base.shape() != mask.shape() {
        return Err(Error::Shape(format!(
            "mask {:?} does not match weights {:?}",
            mask.shape(),
            base.shape()
        )));
    }
    Ok(base.zip_map(mask, |w, m| k0 * w + k1 * m * w))
}

pub fn attach_fine_tune(backbone: &Backbone, task: &TaskSpec) -> Result<TaskModel> {
    attach(StrategyKind::FineTune, backbone, task, &StrategyOptions::default())
}

pub fn attach_feature_extractor(backbone: &Backbone, task: &TaskSpec) -> Result<TaskModel> {
    attach(StrategyKind::FeatureExtractor, backbone, task, &StrategyOptions::default())
}

pub fn attach_series_adapter(backbone: &Backbone, task: &TaskSpec) -> Result<TaskModel> {
    attach(StrategyKind::SeriesAdapter, backbone, task, &StrategyOptions::default())
}

pub fn attach_parallel_adapter(backbone: &Backbone, task: &TaskSpec) -> Result<TaskModel> {
    attach(StrategyKind::ParallelAdapter, backbone, task, &StrategyOptions::default())
}

pub fn attach_piggyback(backbone: &Backbone, task: &TaskSpec) -> Result<TaskModel> {
    attach(StrategyKind::Piggyback, backbone, task, &StrategyOptions::default())
}

pub fn attach_bat(backbone: &Backbone, task: &TaskSpec) -> Result<TaskModel> {
    attach(StrategyKind::Bat, backbone, task, &StrategyOptions::default())
}

/// Builds a task model for `strategy` on top of `backbone`, with a freshly
/// initialized head seeded by `task.seed`.
pub fn attach(
    strategy: StrategyKind,
    backbone: &Backbone,
    task: &TaskSpec,
    options: &StrategyOptions,
) -> Result<TaskModel> {
    options.validate()?;
    if task.num_classes == 0 {
        return Err(Error::InvalidValue(format!("task `{}` has no classes", task.name)));
    }
    let branches = backbone.branches().to_vec();
    let mut feature_dim = 0;
    let mut task_specific = ParamSet::new();
    let shared = if strategy == StrategyKind::FineTune {
        // Independent deep copy; nothing is shared with other tasks.
        task_specific = backbone.params().read().expect("backbone lock poisoned").clone();
        share(ParamSet::new())
    } else {
        backbone.params().clone()
    };
    for branch in &branches {
        let layout = branch.spec.layout()?;
        feature_dim += layout.feature_dim;
        for conv in layout.convs() {
            let prefix = format!("{}.{}", branch.name, conv.name);
            add_site_params(strategy, options, conv, &prefix, &mut task_specific);
        }
    }
    let model = TaskModel {
        task: task.clone(),
        strategy,
        options: options.clone(),
        branches,
        shared,
        task_specific,
        head: new_head(task, feature_dim),
        feature_dim,
    };
    model.check_partition()?;
    Ok(model)
}

fn add_site_params(
    strategy: StrategyKind,
    options: &StrategyOptions,
    conv: &ConvLayer,
    prefix: &str,
    out: &mut ParamSet,
) {
    match strategy {
        StrategyKind::FineTune | StrategyKind::FeatureExtractor => {}
        StrategyKind::Piggyback | StrategyKind::Bat => {
            out.insert(
                format!("{prefix}.mask"),
                Param::latent(Tensor::full(&conv.weight_shape(), options.mask_init)),
            );
            if strategy == StrategyKind::Bat {
                let names = ["k0", "k1", "k2"];
                for (i, name) in names.iter().take(options.bat_form.scalar_count()).enumerate() {
                    out.insert(
                        format!("{prefix}.bat.{name}"),
                        Param::real(Tensor::scalar(options.bat_initial(i))),
                    );
                }
            }
        }
        StrategyKind::SeriesAdapter if conv.takes_adapter() => {
            let c = conv.c_out;
            out.insert(
                format!("{prefix}.adapter.weight"),
                Param::real(Tensor::zeros(&[c, c, 1, 1])),
            );
            out.insert(format!("{prefix}.adapter.bn.gamma"), Param::real(Tensor::full(&[c], 1.0)));
            out.insert(format!("{prefix}.adapter.bn.beta"), Param::real(Tensor::zeros(&[c])));
            out.insert(format!("{prefix}.adapter.bn.mean"), Param::buffer(Tensor::zeros(&[c])));
            out.insert(format!("{prefix}.adapter.bn.var"), Param::buffer(Tensor::full(&[c], 1.0)));
        }
        StrategyKind::ParallelAdapter if conv.takes_adapter() => {
            out.insert(
                format!("{prefix}.adapter.weight"),
                Param::real(Tensor::zeros(&[conv.c_out, conv.c_in, 1, 1])),
            );
        }
        StrategyKind::SeriesAdapter | StrategyKind::ParallelAdapter => {}
    }
}

/// Linear head with PyTorch-style uniform initialization.
fn new_head(task: &TaskSpec, feature_dim: usize) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    let bound = 1.0 / (feature_dim as f64).sqrt();
    let out = task.output_dim();
    let w = (0..out * feature_dim)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    let b = (0..out).map(|_| rng.random_range(-bound..bound)).collect();
    let mut head = ParamSet::new();
    head.insert(
        "head.weight",
        Param::real(Tensor::new(vec![out, feature_dim], w).expect("head shape")),
    );
    head.insert("head.bias", Param::real(Tensor::new(vec![out], b).expect("head shape")));
    head
}

/// ρ_t and ρ₀ computed from the layout alone, without materializing weights.
/// Agrees with [`param_cost_bits`] on any model built by [`attach`].
pub fn strategy_cost(
    strategy: StrategyKind,
    branches: &[BackboneSpec],
    options: &StrategyOptions,
) -> Result<ParamCost> {
    let mut task_bits = 0u64;
    let mut backbone_bits = 0u64;
    for spec in branches {
        let fb = spec.float_bits as u64;
        backbone_bits += spec.backbone_bits()?;
        let layout = spec.layout()?;
        for conv in layout.convs() {
            let weights = conv.weight_count() as u64;
            let (c_in, c_out) = (conv.c_in as u64, conv.c_out as u64);
            task_bits += match strategy {
                StrategyKind::FineTune => (weights + 2 * c_out) * fb,
                StrategyKind::FeatureExtractor => 0,
                StrategyKind::Piggyback => weights,
                StrategyKind::Bat => weights + options.bat_form.scalar_count() as u64 * fb,
                StrategyKind::SeriesAdapter if conv.takes_adapter() => {
                    (c_out * c_out + 2 * c_out) * fb
                }
                StrategyKind::ParallelAdapter if conv.takes_adapter() => c_in * c_out * fb,
                StrategyKind::SeriesAdapter | StrategyKind::ParallelAdapter => 0,
            };
        }
    }
    ParamCost::new(task_bits, backbone_bits)
}

/// Convenience wrapper pairing [`attach`] with its measured cost.
pub fn attach_with_cost(
    strategy: StrategyKind,
    backbone: &Backbone,
    task: &TaskSpec,
    options: &StrategyOptions,
) -> Result<(TaskModel, ParamCost)> {
    let model = attach(strategy, backbone, task, options)?;
    let cost = param_cost_bits(&model)?;
    Ok((model, cost))
}

impl BatForm {
    /// Applies the form to explicit tensors; `k[2]` is ignored for
    /// [`BatForm::Affine`].
    pub fn apply(self, base: &Tensor, mask: &Tensor, k: [f64; 3]) -> Result<Tensor> {
        let affine = bat_transform(base, mask, k[0], k[1])?;
        Ok(match self {
            BatForm::Affine => affine,
            BatForm::AffineMaskBias => affine.zip_map(mask, |a, m| a + k[2] * m),
        })
    }
}
