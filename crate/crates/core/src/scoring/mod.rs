//! Benchmark-level scores: average accuracy, Decathlon Score, its
//! memory-weighted revision, and the Locally Linear score, plus leaderboard
//! assembly.
//!
//! All accuracies here are fractions in `[0, 1]`; percentages are only a
//! concern of the file and rendering layers.

pub mod io;
pub mod plot;
pub mod published;
pub mod render;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Setting;

/// Accuracy and memory ratio `ρ_t/ρ₀` of one method on one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskOutcome {
    pub task_id: String,
    pub accuracy: f64,
    pub param_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub setting: Setting,
    pub tasks: Vec<TaskOutcome>,
}

impl MethodResult {
    pub fn new(method: impl Into<String>, setting: Setting, tasks: Vec<TaskOutcome>) -> Result<Self> {
        let r = Self {
            method: method.into(),
            setting,
            tasks,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Empty("method tasks"));
        }
        check_unique(self.tasks.iter().map(|t| t.task_id.as_str()))?;
        for t in &self.tasks {
            check_fraction(&t.task_id, "accuracy", t.accuracy)?;
            if !t.param_ratio.is_finite() || t.param_ratio < 0.0 {
                return Err(Error::InvalidValue(format!(
                    "{}: param_ratio must be finite and ≥ 0, got {}",
                    t.task_id, t.param_ratio
                )));
            }
        }
        Ok(())
    }

    pub fn task_ids(&self) -> impl Iterator<Item = &str> {
        self.tasks.iter().map(|t| t.task_id.as_str())
    }

    /// Mean memory ratio across tasks.
    pub fn mean_ratio(&self) -> f64 {
        self.tasks.iter().map(|t| t.param_ratio).sum::<f64>() / self.tasks.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskReference {
    pub task_id: String,
    pub alpha_ft: f64,
    pub alpha_fe: f64,
}

/// Fine-tuning and feature-extractor accuracies for every task of a setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceAccuracies {
    pub setting: Setting,
    pub tasks: Vec<TaskReference>,
}

impl ReferenceAccuracies {
    pub fn new(setting: Setting, tasks: Vec<TaskReference>) -> Result<Self> {
        let r = Self { setting, tasks };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Empty("reference tasks"));
        }
        check_unique(self.tasks.iter().map(|t| t.task_id.as_str()))?;
        for t in &self.tasks {
            check_fraction(&t.task_id, "alpha_ft", t.alpha_ft)?;
            check_fraction(&t.task_id, "alpha_fe", t.alpha_fe)?;
            if t.alpha_ft <= t.alpha_fe {
                return Err(Error::InvalidReference {
                    task: t.task_id.clone(),
                    alpha_ft: t.alpha_ft,
                    alpha_fe: t.alpha_fe,
                });
            }
        }
        Ok(())
    }

    pub fn get(&self, task_id: &str) -> Option<&TaskReference> {
        self.tasks.iter().find(|t| t.task_id == task_id)
    }
}

fn default_gamma() -> f64 {
    2.0
}
fn default_lambda() -> f64 {
    10.0
}
fn default_scale() -> f64 {
    1000.0
}
fn default_exponent() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoringConfig {
    /// γ for tasks without an entry in `task_gamma`.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub task_gamma: BTreeMap<String, f64>,
    /// Base of the memory penalty `λ^(−ρ_t/ρ₀)`.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_scale")]
    pub scale: f64,
    /// Multiplies the memory-penalty exponent; `1` is the plain formula.
    #[serde(default = "default_exponent")]
    pub revds_exponent_scale: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            gamma: default_gamma(),
            task_gamma: BTreeMap::new(),
            lambda: default_lambda(),
            scale: default_scale(),
            revds_exponent_scale: default_exponent(),
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        for (task, g) in std::iter::once(("default", &self.gamma))
            .chain(self.task_gamma.iter().map(|(k, v)| (k.as_str(), v)))
        {
            if !(g.is_finite() && *g >= 1.0) {
                return Err(Error::InvalidValue(format!("gamma for {task} must be ≥ 1, got {g}")));
            }
        }
        if !(self.lambda.is_finite() && self.lambda > 1.0) {
            return Err(Error::InvalidValue(format!("lambda must be > 1, got {}", self.lambda)));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::InvalidValue(format!("scale must be > 0, got {}", self.scale)));
        }
        if !(self.revds_exponent_scale.is_finite() && self.revds_exponent_scale > 0.0) {
            return Err(Error::InvalidValue("revds_exponent_scale must be > 0".into()));
        }
        Ok(())
    }

    pub fn gamma_for(&self, task_id: &str) -> f64 {
        self.task_gamma.get(task_id).copied().unwrap_or(self.gamma)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "avga")]
    AvgA,
    #[serde(rename = "ds")]
    Ds,
    #[serde(rename = "revds")]
    RevDs,
    #[serde(rename = "ll")]
    Ll,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::AvgA, Metric::Ds, Metric::RevDs, Metric::Ll];

    pub fn key(self) -> &'static str {
        match self {
            Metric::AvgA => "avga",
            Metric::Ds => "ds",
            Metric::RevDs => "revds",
            Metric::Ll => "ll",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Metric::AvgA => "AvgA",
            Metric::Ds => "DS",
            Metric::RevDs => "RevDS",
            Metric::Ll => "LL",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.key().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidValue(format!("unknown metric `{s}`")))
    }
}

/// Per-task intermediate quantities; each `*_term` is that task's additive
/// share of the corresponding total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskBreakdown {
    pub task_id: String,
    pub accuracy: f64,
    pub param_ratio: f64,
    pub alpha_ft: f64,
    pub alpha_fe: f64,
    pub alpha_min: f64,
    pub gamma: f64,
    pub eta: f64,
    /// `λ^(−c·ρ_t/ρ₀)`
    pub memory_penalty: f64,
    pub ds_term: f64,
    pub revds_term: f64,
    /// `R_t = max(0, 1 − ρ_t/ρ₀)`
    pub r: f64,
    /// `A_t = max(0, α_t − α_FE)/(α_FT − α_FE)`
    pub a: f64,
    pub ll_term: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScores {
    pub method: String,
    pub setting: Setting,
    pub avga: f64,
    pub ds: f64,
    pub revds: f64,
    pub ll: f64,
    pub tasks: Vec<TaskBreakdown>,
}

impl MethodScores {
    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::AvgA => self.avga,
            Metric::Ds => self.ds,
            Metric::RevDs => self.revds,
            Metric::Ll => self.ll,
        }
    }

    pub fn mean_ratio(&self) -> f64 {
        self.tasks.iter().map(|t| t.param_ratio).sum::<f64>() / self.tasks.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Marker {
    Best,
    Second,
}

/// One method's standing under one metric. Equal scores share a rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub method: String,
    pub score: f64,
    pub rank: usize,
    pub marker: Option<Marker>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub setting: Setting,
    pub task_ids: Vec<String>,
    pub config: ScoringConfig,
    pub methods: Vec<MethodScores>,
    pub rankings: BTreeMap<Metric, Vec<RankEntry>>,
}

impl ScoreReport {
    pub fn method(&self, name: &str) -> Option<&MethodScores> {
        self.methods.iter().find(|m| m.method == name)
    }

    pub fn marker(&self, metric: Metric, method: &str) -> Option<Marker> {
        self.rankings
            .get(&metric)?
            .iter()
            .find(|e| e.method == method)
            .and_then(|e| e.marker)
    }
}

/// `(1/N)·Σ α_t`
pub fn avg_accuracy(result: &MethodResult) -> Result<f64> {
    if result.tasks.is_empty() {
        return Err(Error::Empty("method tasks"));
    }
    Ok(result.tasks.iter().map(|t| t.accuracy).sum::<f64>() / result.tasks.len() as f64)
}

/// Accuracy at double the fine-tuning error: `max(0, 2·α_FT − 1)`.
pub fn min_accuracy(alpha_ft: f64) -> f64 {
    (2.0 * alpha_ft - 1.0).max(0.0)
}

pub fn decathlon_score(result: &MethodResult, refs: &ReferenceAccuracies, cfg: &ScoringConfig) -> Result<f64> {
    Ok(score_method(result, refs, cfg)?.ds)
}

pub fn revised_decathlon(result: &MethodResult, refs: &ReferenceAccuracies, cfg: &ScoringConfig) -> Result<f64> {
    Ok(score_method(result, refs, cfg)?.revds)
}

/// The Locally Linear score with its per-task `R_t`, `A_t` breakdown.
pub fn locally_linear(
    result: &MethodResult,
    refs: &ReferenceAccuracies,
    cfg: &ScoringConfig,
) -> Result<(f64, Vec<TaskBreakdown>)> {
    let s = score_method(result, refs, cfg)?;
    Ok((s.ll, s.tasks))
}

/// All four metrics of one method. Totals are the plain sums of the
/// per-task terms.
pub fn score_method(result: &MethodResult, refs: &ReferenceAccuracies, cfg: &ScoringConfig) -> Result<MethodScores> {
    result.validate()?;
    refs.validate()?;
    cfg.validate()?;
    if result.setting != refs.setting {
        return Err(Error::InconsistentTasks(format!(
            "{} is scored against {} references",
            result.setting, refs.setting
        )));
    }
    let n = result.tasks.len() as f64;
    let mut tasks = Vec::with_capacity(result.tasks.len());
    for t in &result.tasks {
        let r = refs.get(&t.task_id).ok_or_else(|| {
            Error::InconsistentTasks(format!("no reference accuracies for task `{}`", t.task_id))
        })?;
        let gamma = cfg.gamma_for(&t.task_id);
        let alpha_min = min_accuracy(r.alpha_ft);
        let eta = cfg.scale * (1.0 - alpha_min).powf(-gamma);
        let excess = (t.accuracy - alpha_min).max(0.0);
        // With α_FT = 1 no accuracy can exceed α_min, whatever η is.
        let ds_term = if excess == 0.0 { 0.0 } else { eta * excess.powf(gamma) };
        let memory_penalty = cfg.lambda.powf(-cfg.revds_exponent_scale * t.param_ratio);
        let revds_term = memory_penalty * ds_term;
        let rr = (1.0 - t.param_ratio).max(0.0);
        let a = (t.accuracy - r.alpha_fe).max(0.0) / (r.alpha_ft - r.alpha_fe);
        let ll_term = cfg.scale / n * rr * a;
        tasks.push(TaskBreakdown {
            task_id: t.task_id.clone(),
            accuracy: t.accuracy,
            param_ratio: t.param_ratio,
            alpha_ft: r.alpha_ft,
            alpha_fe: r.alpha_fe,
            alpha_min,
            gamma,
            eta,
            memory_penalty,
            ds_term,
            revds_term,
            r: rr,
            a,
            ll_term,
        });
    }
    Ok(MethodScores {
        method: result.method.clone(),
        setting: result.setting,
        avga: avg_accuracy(result)?,
        ds: tasks.iter().map(|t| t.ds_term).sum(),
        revds: tasks.iter().map(|t| t.revds_term).sum(),
        ll: tasks.iter().map(|t| t.ll_term).sum(),
        tasks,
    })
}

/// Scores every method and ranks them under each metric.
pub fn leaderboard(results: &[MethodResult], refs: &ReferenceAccuracies, cfg: &ScoringConfig) -> Result<ScoreReport> {
    let first = results.first().ok_or(Error::Empty("results"))?;
    let ids: BTreeSet<&str> = first.task_ids().collect();
    let mut names = BTreeSet::new();
    for r in results {
        if r.setting != first.setting {
            return Err(Error::InconsistentTasks(format!(
                "mixed settings {} and {}",
                first.setting, r.setting
            )));
        }
        if r.task_ids().collect::<BTreeSet<_>>() != ids {
            return Err(Error::InconsistentTasks(format!(
                "`{}` covers a different task set than `{}`",
                r.method, first.method
            )));
        }
        if !names.insert(r.method.as_str()) {
            return Err(Error::InconsistentTasks(format!("duplicate method `{}`", r.method)));
        }
    }
    let methods = results
        .iter()
        .map(|r| score_method(r, refs, cfg))
        .collect::<Result<Vec<_>>>()?;
    let rankings = Metric::ALL
        .into_iter()
        .map(|m| (m, rank(&methods, m)))
        .collect();
    Ok(ScoreReport {
        setting: first.setting,
        task_ids: first.task_ids().map(str::to_owned).collect(),
        config: cfg.clone(),
        methods,
        rankings,
    })
}

fn rank(methods: &[MethodScores], metric: Metric) -> Vec<RankEntry> {
    let mut order: Vec<_> = methods.iter().map(|m| (m.method.clone(), m.get(metric))).collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut out: Vec<RankEntry> = Vec::with_capacity(order.len());
    for (i, (method, score)) in order.into_iter().enumerate() {
        let rank = match out.last() {
            Some(prev) if prev.score == score => prev.rank,
            _ => i + 1,
        };
        let marker = match rank {
            1 => Some(Marker::Best),
            2 => Some(Marker::Second),
            _ => None,
        };
        out.push(RankEntry { method, score, rank, marker });
    }
    out
}

fn check_unique<'a>(ids: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::InconsistentTasks(format!("task `{id}` listed twice")));
        }
    }
    Ok(())
}

fn check_fraction(task: &str, field: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::InvalidValue(format!("{task}: {field} must lie in [0, 1], got {v}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
