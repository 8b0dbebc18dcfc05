//! Forward graph of a (possibly extended) residual backbone plus head.

use std::collections::BTreeMap;

use super::backbone::Branch;
use super::params::{Param, ParamSet};
use super::spec::ConvLayer;
use super::{BatForm, StrategyKind, StrategyOptions};
use crate::autograd::{BatchStats, ConvGeom, NodeId, Tape};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BnMode {
    /// Running statistics everywhere.
    Eval,
    /// Batch statistics for batch norms whose affine terms are task-specific.
    TaskSpecific,
    /// Batch statistics everywhere (backbone calibration).
    All,
}

/// Batch statistics observed by one training-mode batch norm, keyed by the
/// parameter prefix (`<prefix>.gamma`, `<prefix>.mean`, ...).
#[derive(Debug, Clone)]
pub struct BnStatsUpdate {
    pub prefix: String,
    pub stats: BatchStats,
}

pub(crate) struct Ctx<'t> {
    pub tape: &'t mut Tape,
    pub leaves: BTreeMap<String, NodeId>,
    pub bn_updates: Vec<BnStatsUpdate>,
}

impl<'t> Ctx<'t> {
    pub fn new(tape: &'t mut Tape) -> Self {
        Self {
            tape,
            leaves: BTreeMap::new(),
            bn_updates: Vec::new(),
        }
    }
}

pub(crate) struct Network<'a> {
    pub branches: &'a [Branch],
    pub strategy: StrategyKind,
    pub options: &'a StrategyOptions,
    pub shared: &'a ParamSet,
    pub task: &'a ParamSet,
    pub head: &'a ParamSet,
    pub bn_mode: BnMode,
}

impl Network<'_> {
    fn lookup(&self, name: &str) -> Result<&Param> {
        self.task
            .get(name)
            .or_else(|| self.head.get(name))
            .or_else(|| self.shared.get(name))
            .ok_or_else(|| Error::Internal(format!("parameter `{name}` not found")))
    }

    fn leaf(&self, ctx: &mut Ctx<'_>, name: &str) -> Result<NodeId> {
        if let Some(&id) = ctx.leaves.get(name) {
            return Ok(id);
        }
        let value = self.lookup(name)?.value.clone();
        let id = ctx.tape.leaf(value);
        ctx.leaves.insert(name.to_owned(), id);
        Ok(id)
    }

    /// Concatenated branch features, RGB branch first.
    pub fn features(&self, ctx: &mut Ctx<'_>, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.len() != self.branches.len() {
            return Err(Error::Shape(format!(
                "{} inputs for {} branches",
                inputs.len(),
                self.branches.len()
            )));
        }
        let mut feats = Vec::with_capacity(inputs.len());
        for (branch, &x) in self.branches.iter().zip(inputs) {
            feats.push(self.branch(ctx, branch, x)?);
        }
        if feats.len() == 1 {
            Ok(feats[0])
        } else {
            ctx.tape.concat(&feats)
        }
    }

    pub fn output(&self, ctx: &mut Ctx<'_>, features: NodeId) -> Result<NodeId> {
        let w = self.leaf(ctx, "head.weight")?;
        let b = self.leaf(ctx, "head.bias")?;
        ctx.tape.linear(features, w, b)
    }

    fn branch(&self, ctx: &mut Ctx<'_>, branch: &Branch, x: NodeId) -> Result<NodeId> {
        let layout = branch.spec.layout()?;
        let p = &branch.name;
        let mut h = self.conv_site(ctx, p, &layout.stem, x)?;
        h = self.batch_norm(ctx, &format!("{p}.{}.bn", layout.stem.name), h)?;
        h = ctx.tape.relu(h);
        if layout.max_pool {
            h = ctx.tape.max_pool(h, 3, ConvGeom { stride: 2, padding: 1 })?;
        }
        for block in &layout.blocks {
            let mut y = self.conv_site(ctx, p, &block.conv1, h)?;
            y = self.batch_norm(ctx, &format!("{p}.{}.bn", block.conv1.name), y)?;
            y = ctx.tape.relu(y);
            y = self.conv_site(ctx, p, &block.conv2, y)?;
            y = self.batch_norm(ctx, &format!("{p}.{}.bn", block.conv2.name), y)?;
            let skip = match &block.downsample {
                Some(down) => {
                    let s = self.conv_site(ctx, p, down, h)?;
                    self.batch_norm(ctx, &format!("{p}.{}.bn", down.name), s)?
                }
                None => h,
            };
            let sum = ctx.tape.add(y, skip)?;
            h = ctx.tape.relu(sum);
        }
        ctx.tape.global_avg_pool(h)
    }

    /// The effective filters of a convolution under the active strategy.
    fn effective_weight(&self, ctx: &mut Ctx<'_>, prefix: &str) -> Result<NodeId> {
        let w = self.leaf(ctx, &format!("{prefix}.weight"))?;
        match self.strategy {
            StrategyKind::Piggyback => {
                let latent = self.leaf(ctx, &format!("{prefix}.mask"))?;
                let mask = ctx.tape.threshold_ste(latent, self.options.mask_threshold);
                ctx.tape.mul(mask, w)
            }
            StrategyKind::Bat => {
                let latent = self.leaf(ctx, &format!("{prefix}.mask"))?;
                let mask = ctx.tape.threshold_ste(latent, self.options.mask_threshold);
                let k0 = self.leaf(ctx, &format!("{prefix}.bat.k0"))?;
                let k1 = self.leaf(ctx, &format!("{prefix}.bat.k1"))?;
                let masked = ctx.tape.mul(mask, w)?;
                let a = ctx.tape.scale(w, k0)?;
                let b = ctx.tape.scale(masked, k1)?;
                let mut out = ctx.tape.add(a, b)?;
                if self.options.bat_form == BatForm::AffineMaskBias {
                    let k2 = self.leaf(ctx, &format!("{prefix}.bat.k2"))?;
                    let c = ctx.tape.scale(mask, k2)?;
                    out = ctx.tape.add(out, c)?;
                }
                Ok(out)
            }
            _ => Ok(w),
        }
    }

    fn conv_site(&self, ctx: &mut Ctx<'_>, branch: &str, layer: &ConvLayer, x: NodeId) -> Result<NodeId> {
        let prefix = format!("{branch}.{}", layer.name);
        let w = self.effective_weight(ctx, &prefix)?;
        let geom = ConvGeom {
            stride: layer.stride,
            padding: layer.padding,
        };
        let z = ctx.tape.conv2d(x, w, geom)?;
        if !layer.takes_adapter() {
            return Ok(z);
        }
        match self.strategy {
            StrategyKind::SeriesAdapter => {
                let a = self.leaf(ctx, &format!("{prefix}.adapter.weight"))?;
                let u = ctx.tape.conv2d(z, a, ConvGeom { stride: 1, padding: 0 })?;
                let v = self.batch_norm(ctx, &format!("{prefix}.adapter.bn"), u)?;
                ctx.tape.add(z, v)
            }
            StrategyKind::ParallelAdapter => {
                let a = self.leaf(ctx, &format!("{prefix}.adapter.weight"))?;
                let p = ctx.tape.conv2d(
                    x,
                    a,
                    ConvGeom {
                        stride: layer.stride,
                        padding: 0,
                    },
                )?;
                ctx.tape.add(z, p)
            }
            _ => Ok(z),
        }
    }

    fn batch_norm(&self, ctx: &mut Ctx<'_>, prefix: &str, x: NodeId) -> Result<NodeId> {
        let gamma_name = format!("{prefix}.gamma");
        let train = match self.bn_mode {
            BnMode::Eval => false,
            BnMode::All => true,
            BnMode::TaskSpecific => self.task.contains(&gamma_name),
        };
        let gamma = self.leaf(ctx, &gamma_name)?;
        let beta = self.leaf(ctx, &format!("{prefix}.beta"))?;
        if train {
            let (y, stats) = ctx.tape.batch_norm(x, gamma, beta, None)?;
            let stats = stats.ok_or_else(|| Error::Internal("missing batch statistics".into()))?;
            ctx.bn_updates.push(BnStatsUpdate {
                prefix: prefix.to_owned(),
                stats,
            });
            Ok(y)
        } else {
            let mean = self.lookup(&format!("{prefix}.mean"))?.value.data();
            let var = self.lookup(&format!("{prefix}.var"))?.value.data();
            let (y, _) = ctx.tape.batch_norm(x, gamma, beta, Some((mean, var)))?;
            Ok(y)
        }
    }
}
