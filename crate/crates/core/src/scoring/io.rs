//! JSON results and reference files.
//!
//! ```json
//! { "accuracy_unit": "percent",
//!   "methods": [ { "method": "BAT", "setting": "RGB",
//!                  "tasks": [ { "task_id": "rod", "accuracy": 92.9, "param_ratio": 0.03 } ] } ] }
//! ```
//!
//! ```json
//! { "accuracy_unit": "fraction",
//!   "references": [ { "setting": "RGB",
//!                     "tasks": [ { "task_id": "rod", "alpha_ft": 0.908, "alpha_fe": 0.876 } ] } ] }
//! ```

use serde::{Deserialize, Serialize};

use super::{MethodResult, ReferenceAccuracies, TaskOutcome, TaskReference};
use crate::error::{Error, Result};
use crate::model::Setting;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyUnit {
    #[default]
    Fraction,
    Percent,
}

impl AccuracyUnit {
    pub fn to_fraction(self, v: f64) -> f64 {
        match self {
            AccuracyUnit::Fraction => v,
            AccuracyUnit::Percent => v / 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodEntry {
    pub method: String,
    pub setting: Setting,
    pub tasks: Vec<TaskOutcome>,
    /// Free-form provenance attached by the training harness.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultsFile {
    #[serde(default)]
    pub accuracy_unit: AccuracyUnit,
    pub methods: Vec<MethodEntry>,
}

impl ResultsFile {
    /// Validated results with accuracies as fractions.
    pub fn into_results(self) -> Result<Vec<MethodResult>> {
        if self.methods.is_empty() {
            return Err(Error::Empty("results methods"));
        }
        self.methods
            .into_iter()
            .map(|m| {
                let tasks = m
                    .tasks
                    .into_iter()
                    .map(|t| TaskOutcome {
                        accuracy: self.accuracy_unit.to_fraction(t.accuracy),
                        ..t
                    })
                    .collect();
                MethodResult::new(m.method, m.setting, tasks)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferencesFile {
    #[serde(default)]
    pub accuracy_unit: AccuracyUnit,
    pub references: Vec<ReferenceAccuracies>,
}

impl ReferencesFile {
    pub fn into_references(self) -> Result<Vec<ReferenceAccuracies>> {
        if self.references.is_empty() {
            return Err(Error::Empty("references"));
        }
        let mut out: Vec<ReferenceAccuracies> = Vec::new();
        for r in self.references {
            if out.iter().any(|o| o.setting == r.setting) {
                return Err(Error::InconsistentTasks(format!("setting {} listed twice", r.setting)));
            }
            let tasks = r
                .tasks
                .into_iter()
                .map(|t| TaskReference {
                    alpha_ft: self.accuracy_unit.to_fraction(t.alpha_ft),
                    alpha_fe: self.accuracy_unit.to_fraction(t.alpha_fe),
                    ..t
                })
                .collect();
            out.push(ReferenceAccuracies::new(r.setting, tasks)?);
        }
        Ok(out)
    }
}

pub fn parse_results(text: &str) -> Result<Vec<MethodResult>> {
    serde_json::from_str::<ResultsFile>(text)
        .map_err(|e| Error::Parse(format!("results file: {e}")))?
        .into_results()
}

pub fn parse_references(text: &str) -> Result<Vec<ReferenceAccuracies>> {
    serde_json::from_str::<ReferencesFile>(text)
        .map_err(|e| Error::Parse(format!("references file: {e}")))?
        .into_references()
}

/// Results file text (fractions) for `results`.
pub fn results_to_json(results: &[MethodResult]) -> Result<String> {
    let file = ResultsFile {
        accuracy_unit: AccuracyUnit::Fraction,
        methods: results
            .iter()
            .map(|r| MethodEntry {
                method: r.method.clone(),
                setting: r.setting,
                tasks: r.tasks.clone(),
                run: None,
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&file)? + "\n")
}

pub fn references_to_json(refs: &[ReferenceAccuracies]) -> Result<String> {
    let file = ReferencesFile {
        accuracy_unit: AccuracyUnit::Fraction,
        references: refs.to_vec(),
    };
    Ok(serde_json::to_string_pretty(&file)? + "\n")
}

/// Derives reference accuracies from the `FT` and `FE` entries of `results`,
/// one set per setting that has both.
pub fn references_from_results(results: &[MethodResult]) -> Result<Vec<ReferenceAccuracies>> {
    let mut out = Vec::new();
    for setting in Setting::ALL {
        let find = |name: &str| results.iter().find(|r| r.setting == setting && r.method == name);
        let (Some(ft), Some(fe)) = (find("FT"), find("FE")) else {
            continue;
        };
        let tasks = ft
            .tasks
            .iter()
            .map(|t| {
                let e = fe.tasks.iter().find(|e| e.task_id == t.task_id).ok_or_else(|| {
                    Error::InconsistentTasks(format!("FE lacks task `{}`", t.task_id))
                })?;
                Ok(TaskReference {
                    task_id: t.task_id.clone(),
                    alpha_ft: t.accuracy,
                    alpha_fe: e.accuracy,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(ReferenceAccuracies::new(setting, tasks)?);
    }
    Ok(out)
}
