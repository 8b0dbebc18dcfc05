use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::network::{BnMode, Ctx, Network};
use super::params::{share, Param, ParamKind, ParamSet, SharedParams};
use super::spec::BackboneSpec;
use super::{Setting, StrategyKind, StrategyOptions};
use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One backbone network processing one input modality.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Branch {
    pub name: String,
    pub spec: BackboneSpec,
}

impl Branch {
    pub fn new(name: impl Into<String>, spec: BackboneSpec) -> Self {
        Self {
            name: name.into(),
            spec,
        }
    }

    /// `(name, kind, shape)` of every entry this branch owns.
    pub fn expected_entries(&self) -> Result<Vec<(String, ParamKind, Vec<usize>)>> {
        let layout = self.spec.layout()?;
        let mut out = Vec::new();
        for conv in layout.convs() {
            let p = format!("{}.{}", self.name, conv.name);
            out.push((format!("{p}.weight"), ParamKind::Real, conv.weight_shape().to_vec()));
            out.push((format!("{p}.bn.gamma"), ParamKind::Real, vec![conv.c_out]));
            out.push((format!("{p}.bn.beta"), ParamKind::Real, vec![conv.c_out]));
            out.push((format!("{p}.bn.mean"), ParamKind::Buffer, vec![conv.c_out]));
            out.push((format!("{p}.bn.var"), ParamKind::Buffer, vec![conv.c_out]));
        }
        Ok(out)
    }
}

/// The shared pretrained network(s) θ₀. Task models built on a backbone hold
/// a handle to the same parameter store.
#[derive(Debug, Clone)]
pub struct Backbone {
    branches: Vec<Branch>,
    params: SharedParams,
}

impl Backbone {
    /// Seeded He-normal convolution weights, identity batch norm.
    pub fn random(branches: Vec<Branch>, seed: u64) -> Result<Self> {
        check_branches(&branches)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        for branch in &branches {
            let layout = branch.spec.layout()?;
            for conv in layout.convs() {
                let p = format!("{}.{}", branch.name, conv.name);
                let fan_in = (conv.c_in * conv.kernel * conv.kernel) as f64;
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt())
                    .map_err(|e| Error::Internal(e.to_string()))?;
                let data = (0..conv.weight_count()).map(|_| normal.sample(&mut rng)).collect();
                set.insert(
                    format!("{p}.weight"),
                    Param::real(Tensor::new(conv.weight_shape().to_vec(), data)?),
                );
                set.insert(format!("{p}.bn.gamma"), Param::real(Tensor::full(&[conv.c_out], 1.0)));
                set.insert(format!("{p}.bn.beta"), Param::real(Tensor::zeros(&[conv.c_out])));
                set.insert(format!("{p}.bn.mean"), Param::buffer(Tensor::zeros(&[conv.c_out])));
                set.insert(format!("{p}.bn.var"), Param::buffer(Tensor::full(&[conv.c_out], 1.0)));
            }
        }
        Ok(Self {
            branches,
            params: share(set),
        })
    }

    /// One branch per modality of `setting`, all sharing `spec`.
    pub fn for_setting(setting: Setting, spec: &BackboneSpec, seed: u64) -> Result<Self> {
        Self::random(setting_branches(setting, spec), seed)
    }

    /// Externally supplied weights for the branches of `setting`.
    pub fn from_params_for_setting(setting: Setting, spec: &BackboneSpec, params: ParamSet) -> Result<Self> {
        Self::from_params(setting_branches(setting, spec), params)
    }

    /// Wraps externally supplied weights after checking that every expected
    /// entry is present with the right kind and shape.
    pub fn from_params(branches: Vec<Branch>, params: ParamSet) -> Result<Self> {
        check_branches(&branches)?;
        let mut expected = 0;
        for branch in &branches {
            for (name, kind, shape) in branch.expected_entries()? {
                let p = params
                    .get(&name)
                    .ok_or_else(|| Error::InvalidBackbone(format!("weights lack `{name}`")))?;
                if p.kind != kind || p.value.shape() != shape.as_slice() {
                    return Err(Error::InvalidBackbone(format!(
                        "`{name}` should be {kind:?} {shape:?}, found {:?} {:?}",
                        p.kind,
                        p.value.shape()
                    )));
                }
                expected += 1;
            }
        }
        if expected != params.len() {
            return Err(Error::InvalidBackbone(format!(
                "weights carry {} unexpected entries",
                params.len() - expected
            )));
        }
        Ok(Self {
            branches,
            params: share(params),
        })
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn params(&self) -> &SharedParams {
        &self.params
    }

    pub fn fingerprint(&self) -> String {
        self.params.read().expect("backbone lock poisoned").fingerprint()
    }

    /// ρ₀: all branches' parameters at their float width.
    pub fn backbone_bits(&self) -> Result<u64> {
        self.branches.iter().map(|b| b.spec.backbone_bits()).sum()
    }

    /// Sets every batch-norm running statistic to the average of the batch
    /// statistics observed on `batches` (each batch: one tensor per branch).
    pub fn calibrate_batch_norm(&self, batches: &[Vec<Tensor>]) -> Result<()> {
        if batches.is_empty() {
            return Err(Error::Empty("calibration batches"));
        }
        let mut sums: std::collections::BTreeMap<String, (Vec<f64>, Vec<f64>)> = Default::default();
        {
            let set = self.params.read().expect("backbone lock poisoned");
            let empty = ParamSet::new();
            let options = StrategyOptions::default();
            let net = Network {
                branches: &self.branches,
                strategy: StrategyKind::FeatureExtractor,
                options: &options,
                shared: &set,
                task: &empty,
                head: &empty,
                bn_mode: BnMode::All,
            };
            for batch in batches {
                let mut tape = Tape::new();
                let mut ctx = Ctx::new(&mut tape);
                let inputs: Vec<_> = batch.iter().map(|t| ctx.tape.leaf(t.clone())).collect();
                net.features(&mut ctx, &inputs)?;
                for update in ctx.bn_updates {
                    let entry = sums
                        .entry(update.prefix)
                        .or_insert_with(|| (vec![0.0; update.stats.mean.len()], vec![0.0; update.stats.var.len()]));
                    for (a, b) in entry.0.iter_mut().zip(&update.stats.mean) {
                        *a += b;
                    }
                    for (a, b) in entry.1.iter_mut().zip(&update.stats.var) {
                        *a += b;
                    }
                }
            }
        }
        let k = batches.len() as f64;
        let mut set = self.params.write().expect("backbone lock poisoned");
        for (prefix, (mean, var)) in sums {
            for (suffix, values) in [("mean", mean), ("var", var)] {
                let name = format!("{prefix}.{suffix}");
                let p = set
                    .get_mut(&name)
                    .ok_or_else(|| Error::Internal(format!("missing buffer `{name}`")))?;
                for (dst, v) in p.value.data_mut().iter_mut().zip(values) {
                    *dst = v / k;
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn setting_branches(setting: Setting, spec: &BackboneSpec) -> Vec<Branch> {
    setting
        .branch_names()
        .iter()
        .map(|n| Branch::new(*n, spec.clone()))
        .collect()
}

fn check_branches(branches: &[Branch]) -> Result<()> {
    if branches.is_empty() {
        return Err(Error::InvalidBackbone("at least one branch required".into()));
    }
    for (i, b) in branches.iter().enumerate() {
        b.spec.validate()?;
        if branches[..i].iter().any(|o| o.name == b.name) {
            return Err(Error::InvalidBackbone(format!("duplicate branch `{}`", b.name)));
        }
    }
    let dims: Vec<_> = branches
        .iter()
        .map(|b| b.spec.layout().map(|l| l.feature_dim))
        .collect::<Result<_>>()?;
    if dims.iter().any(|&d| d != dims[0]) {
        return Err(Error::InvalidBackbone(
            "fused branches must share the same architecture width".into(),
        ));
    }
    Ok(())
}
