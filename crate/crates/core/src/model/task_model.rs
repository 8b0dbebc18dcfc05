use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::backbone::Branch;
use super::network::{BnMode, BnStatsUpdate, Ctx, Network};
use super::params::{ParamKind, ParamSet, SharedParams};
use super::{StrategyKind, StrategyOptions, TaskSpec};
use crate::autograd::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which collection of the partition a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    /// θ₀
    Shared,
    /// θ_t
    TaskSpecific,
    /// Ω_t
    Head,
}

/// Task-specific memory ρ_t against backbone memory ρ₀, both in bits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamCost {
    pub task_bits: u64,
    pub backbone_bits: u64,
    pub ratio: f64,
}

impl ParamCost {
    pub fn new(task_bits: u64, backbone_bits: u64) -> Result<Self> {
        if backbone_bits == 0 {
            return Err(Error::InvalidValue("backbone_bits must be positive".into()));
        }
        Ok(Self {
            task_bits,
            backbone_bits,
            ratio: task_bits as f64 / backbone_bits as f64,
        })
    }
}

/// A backbone extended for one task: shared parameters θ₀ (held by handle,
/// common to every task on the same backbone), task-specific parameters θ_t
/// and the output head Ω_t.
#[derive(Debug, Clone)]
pub struct TaskModel {
    pub(crate) task: TaskSpec,
    pub(crate) strategy: StrategyKind,
    pub(crate) options: StrategyOptions,
    pub(crate) branches: Vec<Branch>,
    pub(crate) shared: SharedParams,
    pub(crate) task_specific: ParamSet,
    pub(crate) head: ParamSet,
    pub(crate) feature_dim: usize,
}

pub struct ForwardOutput {
    pub output: NodeId,
    pub features: NodeId,
    /// Leaf node of every parameter the graph read, by name.
    pub leaves: BTreeMap<String, NodeId>,
    pub bn_updates: Vec<BnStatsUpdate>,
}

impl TaskModel {
    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn strategy(&self) -> StrategyKind {
        self.strategy
    }

    pub fn options(&self) -> &StrategyOptions {
        &self.options
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn shared(&self) -> &SharedParams {
        &self.shared
    }

    pub fn task_specific(&self) -> &ParamSet {
        &self.task_specific
    }

    pub fn task_specific_mut(&mut self) -> &mut ParamSet {
        &mut self.task_specific
    }

    pub fn head(&self) -> &ParamSet {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut ParamSet {
        &mut self.head
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn group_of(&self, name: &str) -> Option<ParamGroup> {
        if self.task_specific.contains(name) {
            Some(ParamGroup::TaskSpecific)
        } else if self.head.contains(name) {
            Some(ParamGroup::Head)
        } else if self.shared.read().expect("shared lock poisoned").contains(name) {
            Some(ParamGroup::Shared)
        } else {
            None
        }
    }

    /// Fails if any name appears in two collections.
    pub fn check_partition(&self) -> Result<()> {
        let shared = self.shared.read().expect("shared lock poisoned");
        let mut seen = BTreeSet::new();
        for name in shared
            .names()
            .chain(self.task_specific.names())
            .chain(self.head.names())
        {
            if !seen.insert(name) {
                return Err(Error::OverlappingPartition(name.to_owned()));
            }
        }
        Ok(())
    }

    /// Builds the forward graph for a batch (one input tensor per branch).
    /// In training mode, batch norms owned by θ_t use batch statistics.
    pub fn forward(&self, tape: &mut Tape, inputs: &[Tensor], train: bool) -> Result<ForwardOutput> {
        let shared = self.shared.read().expect("shared lock poisoned");
        let net = Network {
            branches: &self.branches,
            strategy: self.strategy,
            options: &self.options,
            shared: &shared,
            task: &self.task_specific,
            head: &self.head,
            bn_mode: if train { BnMode::TaskSpecific } else { BnMode::Eval },
        };
        let mut ctx = Ctx::new(tape);
        let ids: Vec<_> = inputs.iter().map(|t| ctx.tape.leaf(t.clone())).collect();
        let features = net.features(&mut ctx, &ids)?;
        let output = net.output(&mut ctx, features)?;
        Ok(ForwardOutput {
            output,
            features,
            leaves: ctx.leaves,
            bn_updates: ctx.bn_updates,
        })
    }

    /// Inference-mode features `[N, feature_dim]`.
    pub fn features(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, inputs, false)?;
        Ok(tape.value(out.features).clone())
    }

    /// Inference-mode head outputs `[N, output_dim]`.
    pub fn predict(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, inputs, false)?;
        Ok(tape.value(out.output).clone())
    }

    /// Folds training-mode batch statistics into the task-specific running
    /// buffers: `running = (1 - momentum)·running + momentum·batch`.
    pub fn apply_bn_updates(&mut self, updates: &[BnStatsUpdate], momentum: f64) -> Result<()> {
        for u in updates {
            for (suffix, values) in [("mean", &u.stats.mean), ("var", &u.stats.var)] {
                let name = format!("{}.{suffix}", u.prefix);
                let p = self.task_specific.get_mut(&name).ok_or_else(|| {
                    Error::Internal(format!("running statistic `{name}` is not task-specific"))
                })?;
                if p.kind != ParamKind::Buffer {
                    return Err(Error::Internal(format!("`{name}` is not a buffer")));
                }
                for (r, v) in p.value.data_mut().iter_mut().zip(values) {
                    *r = (1.0 - momentum) * *r + momentum * v;
                }
            }
        }
        Ok(())
    }

    pub fn backbone_bits(&self) -> Result<u64> {
        self.branches.iter().map(|b| b.spec.backbone_bits()).sum()
    }

    fn float_bits(&self) -> u32 {
        self.branches[0].spec.float_bits
    }
}

/// Exact bit accounting of θ_t against θ₀. Real task parameters count at the
/// backbone's float width, mask entries at one bit, running statistics and
/// the head not at all.
pub fn param_cost_bits(model: &TaskModel) -> Result<ParamCost> {
    model.check_partition()?;
    ParamCost::new(
        model.task_specific.bits(model.float_bits()),
        model.backbone_bits()?,
    )
}

/// Digest over every shared value in canonical order.
pub fn shared_fingerprint(model: &TaskModel) -> String {
    model.shared.read().expect("shared lock poisoned").fingerprint()
}
