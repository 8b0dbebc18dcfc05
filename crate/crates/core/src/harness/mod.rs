//! Sequential training: attach a strategy for each task in turn, train its
//! task-specific parameters and head, evaluate, and check that earlier tasks
//! are left untouched.

pub mod desk;
pub mod optim;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::attach;
use crate::autograd::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{classification_accuracy, pose_accuracy, PosePrediction, Rotation, POSE_THRESHOLD_DEG};
use crate::model::{
    param_cost_bits, Backbone, ParamCost, ParamGroup, ParamKind, Setting, StrategyKind,
    StrategyOptions, TaskKind, TaskModel, TaskSpec,
};
use crate::scoring::io::{AccuracyUnit, MethodEntry, ResultsFile};
use crate::scoring::TaskOutcome;
use crate::tensor::Tensor;
use optim::{Adam, Sgd};

/// Number of leading test samples re-evaluated after every later task.
pub const PROBE_SIZE: usize = 64;

/// Full-scale Adam learning rates of the mask strategies for the three
/// benchmark tasks.
pub const FULL_SCALE_MASK_LR: [(&str, f64); 3] = [("rod", 1e-5), ("linemod", 5e-5), ("nyu", 1e-4)];

pub fn full_scale_mask_lr(task: &str) -> Option<f64> {
    FULL_SCALE_MASK_LR.iter().find(|(t, _)| *t == task).map(|(_, lr)| *lr)
}

fn d_epochs() -> usize {
    30
}
fn d_batch() -> usize {
    32
}
fn d_lr() -> f64 {
    0.005
}
fn d_momentum() -> f64 {
    0.9
}
fn d_wd() -> f64 {
    5e-5
}
fn d_mask_lr() -> f64 {
    1e-3
}
fn d_decay_epoch() -> usize {
    20
}
fn d_decay_factor() -> f64 {
    0.1
}
fn d_bn_momentum() -> f64 {
    0.1
}
fn d_true() -> bool {
    true
}
fn d_one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    /// SGD learning rate (head, and every trainable parameter of the
    /// non-mask strategies).
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    /// Adam learning rate for the non-head parameters of PB and BAT, unless
    /// the task overrides it.
    #[serde(default = "d_mask_lr")]
    pub mask_learning_rate: f64,
    #[serde(default = "d_decay_epoch")]
    pub lr_decay_epoch: usize,
    #[serde(default = "d_decay_factor")]
    pub lr_decay_factor: f64,
    #[serde(default = "d_bn_momentum")]
    pub bn_momentum: f64,
    /// Which strategies normalize their task-owned batch norms with batch
    /// statistics while training.
    #[serde(default)]
    pub batch_stats: BatchStats,
    /// Weight of the quaternion term in the pose loss.
    #[serde(default = "d_one")]
    pub pose_loss_weight: f64,
    #[serde(default)]
    pub seed: u64,
    /// Computation is single-threaded and seeded, so runs are always
    /// bit-reproducible; the flag is carried into run records.
    #[serde(default = "d_true")]
    pub deterministic: bool,
    /// Test fixture: also apply SGD updates to θ₀. Breaks non-interference
    /// on purpose.
    #[doc(hidden)]
    #[serde(skip)]
    pub unfreeze_shared: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: d_epochs(),
            batch_size: d_batch(),
            learning_rate: d_lr(),
            momentum: d_momentum(),
            weight_decay: d_wd(),
            mask_learning_rate: d_mask_lr(),
            lr_decay_epoch: d_decay_epoch(),
            lr_decay_factor: d_decay_factor(),
            bn_momentum: d_bn_momentum(),
            batch_stats: BatchStats::default(),
            pose_loss_weight: 1.0,
            seed: 0,
            deterministic: true,
            unfreeze_shared: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("mask_learning_rate", self.mask_learning_rate),
            ("lr_decay_factor", self.lr_decay_factor),
            ("pose_loss_weight", self.pose_loss_weight),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidValue(format!("{name} must be positive, got {v}")));
            }
        }
        let unit = [
            ("momentum", self.momentum),
            ("bn_momentum", self.bn_momentum),
        ];
        for (name, v) in unit {
            if !(0.0..1.0).contains(&v) && !(name == "bn_momentum" && v == 1.0) {
                return Err(Error::InvalidValue(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::InvalidValue("weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidValue("batch_size must be positive".into()));
        }
        if self.epochs > 0 && self.lr_decay_epoch >= self.epochs {
            return Err(Error::InvalidValue(format!(
                "lr_decay_epoch {} must be below epochs {}",
                self.lr_decay_epoch, self.epochs
            )));
        }
        Ok(())
    }

    fn lr_scale(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_decay_epoch {
            self.lr_decay_factor
        } else {
            1.0
        }
    }
}

/// Batch-norm behaviour during training. Batch statistics are folded into
/// the running statistics with `bn_momentum`; evaluation always uses the
/// running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchStats {
    /// Every batch norm keeps its running statistics.
    Never,
    /// Only fine-tuning, whose batch norms are copies of pretrained ones.
    /// Adapter batch norms start from identity statistics behind a zero
    /// convolution and stay in inference mode.
    #[default]
    FineTune,
    /// Every task-owned batch norm.
    TaskOwned,
}

impl BatchStats {
    pub fn applies_to(self, strategy: StrategyKind) -> bool {
        match self {
            BatchStats::Never => false,
            BatchStats::FineTune => strategy == StrategyKind::FineTune,
            BatchStats::TaskOwned => true,
        }
    }
}

/// One task of a sequence: its head specification and preprocessed splits.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Dataset,
    pub test: Dataset,
    /// Overrides [`TrainConfig::mask_learning_rate`].
    pub mask_learning_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: String,
    pub kind: TaskKind,
    pub accuracy: f64,
    pub cost: ParamCost,
    pub epochs: usize,
    /// Mean training loss of the last epoch (`None` without training).
    pub final_loss: Option<f64>,
    pub wall_time_s: f64,
}

fn split_pose_outputs(outputs: &Tensor, num_classes: usize) -> Vec<PosePrediction> {
    (0..outputs.dim(0))
        .map(|i| {
            let row = outputs.row(i);
            let q = [row[num_classes], row[num_classes + 1], row[num_classes + 2], row[num_classes + 3]];
            PosePrediction {
                class_label: argmax(&row[..num_classes]),
                rotation: Rotation::from_quaternion(q).unwrap_or(Rotation::IDENTITY),
            }
        })
        .collect()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Inference-mode head outputs for every sample, `batch_size` at a time,
/// flattened row-major.
pub fn predict_all(model: &TaskModel, data: &Dataset, batch_size: usize) -> Result<Tensor> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut rows = Vec::new();
    let width = model.task().output_dim();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = data.batch(chunk)?;
        rows.extend_from_slice(model.predict(&batch.inputs)?.data());
    }
    Tensor::new(vec![data.len(), width], rows)
}

/// Accuracy of `model` on `data` under the task's evaluator.
pub fn evaluate(model: &TaskModel, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let outputs = predict_all(model, data, batch_size)?;
    let k = model.task().num_classes;
    match model.task().kind {
        TaskKind::Classification => {
            let pred: Vec<usize> = (0..outputs.dim(0)).map(|i| argmax(outputs.row(i))).collect();
            let truth: Vec<usize> = data.samples.iter().map(|s| s.label).collect();
            classification_accuracy(&pred, &truth)
        }
        TaskKind::Pose => {
            let pred = split_pose_outputs(&outputs, k);
            let truth = data
                .samples
                .iter()
                .map(|s| {
                    Ok(PosePrediction {
                        class_label: s.label,
                        rotation: s
                            .rotation
                            .ok_or_else(|| Error::InvalidValue(format!("pose sample `{}` has no rotation", s.id)))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            pose_accuracy(&pred, &truth, POSE_THRESHOLD_DEG)
        }
    }
}

/// Builds the training loss of one batch and returns it with the forward
/// bookkeeping.
fn batch_loss(
    model: &TaskModel,
    tape: &mut Tape,
    data: &Dataset,
    indices: &[usize],
    train: bool,
    pose_weight: f64,
) -> Result<(crate::autograd::NodeId, crate::model::ForwardOutput)> {
    let batch = data.batch(indices)?;
    let fwd = model.forward(tape, &batch.inputs, train)?;
    let k = model.task().num_classes;
    let loss = match model.task().kind {
        TaskKind::Classification => tape.cross_entropy(fwd.output, &batch.labels)?,
        TaskKind::Pose => {
            let logits = tape.slice_cols(fwd.output, 0, k)?;
            let quat = tape.slice_cols(fwd.output, k, 4)?;
            let targets = batch
                .rotations
                .iter()
                .map(|r| {
                    r.map(|r| r.to_quaternion())
                        .ok_or_else(|| Error::InvalidValue("pose batch without rotations".into()))
                })
                .collect::<Result<Vec<_>>>()?;
            let ce = tape.cross_entropy(logits, &batch.labels)?;
            let ql = tape.quaternion_loss(quat, &targets)?;
            let w = tape.leaf(Tensor::scalar(pose_weight));
            let ql = tape.scale(ql, w)?;
            tape.add(ce, ql)?
        }
    };
    Ok((loss, fwd))
}

/// Loss gradient with respect to every parameter the model reads, shared
/// ones included, on the first `batch_size` training samples.
pub fn loss_gradients(model: &TaskModel, data: &Dataset, batch_size: usize) -> Result<BTreeMap<String, Vec<f64>>> {
    let n = batch_size.min(data.len());
    if n == 0 {
        return Err(Error::Empty("training split"));
    }
    let idx: Vec<usize> = (0..n).collect();
    let mut tape = Tape::new();
    let (loss, fwd) = batch_loss(model, &mut tape, data, &idx, false, 1.0)?;
    let grads = tape.backward(loss)?;
    Ok(fwd
        .leaves
        .iter()
        .filter_map(|(name, id)| grads.get(*id).map(|g| (name.clone(), g.data().to_vec())))
        .collect())
}

struct Optimizers {
    sgd: Sgd,
    adam: Adam,
}

/// Trains θ_t and the head of `model` on `train`, then evaluates on `test`.
pub fn train_task(
    model: &mut TaskModel,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    mask_learning_rate: Option<f64>,
) -> Result<TaskResult> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let start = Instant::now();
    let mask_lr = mask_learning_rate.unwrap_or(cfg.mask_learning_rate);
    let adam_for_task = model.strategy().uses_masks();
    let mut opt = Optimizers {
        sgd: Sgd::new(cfg.momentum),
        adam: Adam::default(),
    };
    let batch_stats = cfg.batch_stats.applies_to(model.strategy());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut final_loss = None;
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        let scale = cfg.lr_scale(epoch);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let (loss, fwd) = batch_loss(model, &mut tape, train, chunk, batch_stats, cfg.pose_loss_weight)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "task `{}` epoch {epoch}: loss {value}",
                    model.task().name
                )));
            }
            total += value;
            batches += 1;
            let grads = tape.backward(loss)?;
            for (name, id) in &fwd.leaves {
                let Some(g) = grads.get(*id) else { continue };
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "task `{}` epoch {epoch}: gradient of `{name}`",
                        model.task().name
                    )));
                }
                let group = model.group_of(name);
                let (set, use_adam) = match group {
                    Some(ParamGroup::Head) => (model.head_mut(), false),
                    Some(ParamGroup::TaskSpecific) => (model.task_specific_mut(), adam_for_task),
                    Some(ParamGroup::Shared) if cfg.unfreeze_shared => {
                        let shared = model.shared().clone();
                        let mut guard = shared.write().expect("shared lock poisoned");
                        if let Some(p) = guard.get_mut(name) {
                            if p.kind == ParamKind::Real {
                                opt.sgd
                                    .step(name, p.value.data_mut(), g.data(), cfg.learning_rate * scale, 0.0);
                            }
                        }
                        continue;
                    }
                    _ => continue,
                };
                let p = set
                    .get_mut(name)
                    .ok_or_else(|| Error::Internal(format!("`{name}` vanished from its group")))?;
                let wd = match p.kind {
                    ParamKind::Real => cfg.weight_decay,
                    ParamKind::BinaryLatent => 0.0,
                    ParamKind::Buffer => continue,
                };
                if use_adam {
                    opt.adam.step(name, p.value.data_mut(), g.data(), mask_lr * scale, wd);
                } else {
                    opt.sgd
                        .step(name, p.value.data_mut(), g.data(), cfg.learning_rate * scale, wd);
                }
            }
            if batch_stats {
                model.apply_bn_updates(&fwd.bn_updates, cfg.bn_momentum)?;
            }
        }
        final_loss = Some(total / batches as f64);
        log::debug!(
            "{} {} epoch {epoch}: loss {:.4}",
            model.strategy(),
            model.task().name,
            total / batches as f64
        );
    }
    let accuracy = evaluate(model, test, cfg.batch_size)?;
    Ok(TaskResult {
        task: model.task().name.clone(),
        kind: model.task().kind,
        accuracy,
        cost: param_cost_bits(model)?,
        epochs: cfg.epochs,
        final_loss,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Probe outputs of task `task` taken right after task `after_task`
/// finished training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSnapshot {
    pub after_task: usize,
    pub task: usize,
    pub outputs: Vec<f64>,
}

impl ProbeSnapshot {
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.outputs {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRun {
    pub strategy: StrategyKind,
    pub setting: Setting,
    pub tasks: Vec<TaskResult>,
    pub initial_fingerprint: String,
    /// Shared-parameter fingerprint after each task.
    pub fingerprints: Vec<String>,
    pub probes: Vec<ProbeSnapshot>,
    pub train: TrainConfig,
}

/// Everything `run_sequence` needs.
#[derive(Debug, Clone)]
pub struct RunPlan {
    pub strategy: StrategyKind,
    pub setting: Setting,
    pub backbone: Backbone,
    pub options: StrategyOptions,
    pub train: TrainConfig,
    pub tasks: Vec<TaskData>,
}

/// Trains the tasks one after another on a shared backbone. After each task,
/// every task seen so far is re-run on its probe samples.
pub fn run_sequence(plan: &RunPlan) -> Result<BenchmarkRun> {
    plan.train.validate()?;
    plan.options.validate()?;
    if plan.tasks.is_empty() {
        return Err(Error::Empty("task list"));
    }
    let initial_fingerprint = plan.backbone.fingerprint();
    let mut models: Vec<TaskModel> = Vec::with_capacity(plan.tasks.len());
    let mut probes = Vec::new();
    let mut tasks = Vec::new();
    let mut fingerprints = Vec::new();
    for (i, task) in plan.tasks.iter().enumerate() {
        log::info!("{} {}: task {} ({})", plan.strategy, plan.setting, i, task.spec.name);
        let mut model = attach(plan.strategy, &plan.backbone, &task.spec, &plan.options)?;
        // Keyed by the task, not its position, so reordering tasks leaves
        // each task's training unchanged on a frozen backbone.
        let mut cfg = plan.train.clone();
        cfg.seed = plan.train.seed.wrapping_add(task.spec.seed);
        let result = train_task(&mut model, &task.train, &task.test, &cfg, task.mask_learning_rate)?;
        log::info!("  accuracy {:.4}, ratio {:.4}", result.accuracy, result.cost.ratio);
        tasks.push(result);
        models.push(model);
        fingerprints.push(plan.backbone.fingerprint());
        for (j, m) in models.iter().enumerate() {
            let probe = plan.tasks[j].test.head(PROBE_SIZE);
            probes.push(ProbeSnapshot {
                after_task: i,
                task: j,
                outputs: predict_all(m, &probe, plan.train.batch_size)?.into_data(),
            });
        }
    }
    Ok(BenchmarkRun {
        strategy: plan.strategy,
        setting: plan.setting,
        tasks,
        initial_fingerprint,
        fingerprints,
        probes,
        train: plan.train.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeViolation {
    pub task: usize,
    pub after_task: usize,
    pub changed_outputs: usize,
    pub max_abs_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InterferenceReport {
    pub comparisons: usize,
    pub violations: Vec<ProbeViolation>,
    /// Stages whose shared fingerprint differs from the initial one.
    pub fingerprint_changes: Vec<usize>,
}

impl InterferenceReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty() && self.fingerprint_changes.is_empty()
    }
}

/// Compares each task's probe outputs right after its own training with
/// every later snapshot, bit for bit.
pub fn verify_non_interference(run: &BenchmarkRun) -> InterferenceReport {
    let mut report = InterferenceReport::default();
    let baseline: BTreeMap<usize, &ProbeSnapshot> = run
        .probes
        .iter()
        .filter(|p| p.after_task == p.task)
        .map(|p| (p.task, p))
        .collect();
    for p in run.probes.iter().filter(|p| p.after_task > p.task) {
        let Some(base) = baseline.get(&p.task) else { continue };
        report.comparisons += 1;
        let mut changed = 0;
        let mut max = 0.0f64;
        for (a, b) in base.outputs.iter().zip(&p.outputs) {
            if a.to_bits() != b.to_bits() {
                changed += 1;
                max = max.max((a - b).abs());
            }
        }
        if changed > 0 || base.outputs.len() != p.outputs.len() {
            report.violations.push(ProbeViolation {
                task: p.task,
                after_task: p.after_task,
                changed_outputs: changed,
                max_abs_diff: max,
            });
        }
    }
    for (i, fp) in run.fingerprints.iter().enumerate() {
        if *fp != run.initial_fingerprint {
            report.fingerprint_changes.push(i);
        }
    }
    report
}

impl BenchmarkRun {
    /// The run as a results document (accuracies as fractions) whose `run`
    /// field carries fingerprints, bit counts, timings and probe digests.
    /// Wall times are left out in deterministic mode so the document is
    /// byte-stable.
    pub fn to_results_file(&self, method: Option<&str>) -> ResultsFile {
        let report = verify_non_interference(self);
        let details = serde_json::json!({
            "strategy": self.strategy,
            "initial_fingerprint": self.initial_fingerprint,
            "fingerprints": self.fingerprints,
            "tasks": self.tasks.iter().map(|t| serde_json::json!({
                "task": t.task,
                "task_bits": t.cost.task_bits,
                "backbone_bits": t.cost.backbone_bits,
                "epochs": t.epochs,
                "final_loss": t.final_loss,
                "wall_time_s": (!self.train.deterministic).then_some(t.wall_time_s),
            })).collect::<Vec<_>>(),
            "probe_digests": self.probes.iter().map(|p| serde_json::json!({
                "after_task": p.after_task,
                "task": p.task,
                "sha256": p.digest(),
            })).collect::<Vec<_>>(),
            "non_interference": report,
            "train": self.train,
        });
        ResultsFile {
            accuracy_unit: AccuracyUnit::Fraction,
            methods: vec![MethodEntry {
                method: method.unwrap_or(self.strategy.code()).to_owned(),
                setting: self.setting,
                tasks: self
                    .tasks
                    .iter()
                    .map(|t| TaskOutcome {
                        task_id: t.task.clone(),
                        accuracy: t.accuracy,
                        param_ratio: t.cost.ratio,
                    })
                    .collect(),
                run: Some(details),
            }],
        }
    }
}
