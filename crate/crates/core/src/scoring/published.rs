//! The published per-task accuracy table and score table, shipped as a
//! fixture, and the comparison of recomputed scores against the printed ones.

use serde::{Deserialize, Serialize};

use super::io::AccuracyUnit;
use super::{leaderboard, MethodResult, Metric, ReferenceAccuracies, ScoreReport, ScoringConfig, TaskOutcome, TaskReference};
use crate::error::{Error, Result};
use crate::model::Setting;

const FIXTURE: &str = include_str!("../../fixtures/published_tables.json");

/// AvgA tolerance in percentage points.
pub const AVGA_TOLERANCE_PP: f64 = 0.1;
pub const DS_TOLERANCE: f64 = 5.0;
pub const LL_TOLERANCE: f64 = 6.0;
/// Relative tolerance of RevDS against its closed-form expectation.
pub const REVDS_REL_TOLERANCE: f64 = 1e-9;
/// Absorbs binary round-off when a delta lands exactly on a tolerance.
const EDGE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrintedScores {
    pub avga: f64,
    pub ds: f64,
    pub revds: f64,
    pub ll: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PublishedRow {
    pub method: String,
    /// Mean per-task memory ratio.
    pub par: f64,
    /// One accuracy per task, in `accuracy_unit`.
    pub accuracy: Vec<f64>,
    pub printed: PrintedScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PublishedSetting {
    pub setting: Setting,
    pub rows: Vec<PublishedRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PublishedTables {
    pub accuracy_unit: AccuracyUnit,
    pub tasks: Vec<String>,
    pub settings: Vec<PublishedSetting>,
}

impl PublishedTables {
    /// The shipped fixture.
    pub fn load() -> Self {
        Self::parse(FIXTURE).expect("shipped fixture is valid")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(text).map_err(|e| Error::Parse(format!("published tables: {e}")))?;
        for s in &t.settings {
            for r in &s.rows {
                if r.accuracy.len() != t.tasks.len() {
                    return Err(Error::LengthMismatch {
                        left: r.accuracy.len(),
                        right: t.tasks.len(),
                    });
                }
            }
        }
        Ok(t)
    }

    pub fn setting(&self, setting: Setting) -> Result<&PublishedSetting> {
        self.settings
            .iter()
            .find(|s| s.setting == setting)
            .ok_or_else(|| Error::InconsistentTasks(format!("no published rows for {setting}")))
    }

    /// Every row of `setting` as a method result, each task carrying the
    /// row's memory ratio.
    pub fn results(&self, setting: Setting) -> Result<Vec<MethodResult>> {
        self.setting(setting)?
            .rows
            .iter()
            .map(|r| {
                let tasks = self
                    .tasks
                    .iter()
                    .zip(&r.accuracy)
                    .map(|(id, &a)| TaskOutcome {
                        task_id: id.clone(),
                        accuracy: self.accuracy_unit.to_fraction(a),
                        param_ratio: r.par,
                    })
                    .collect();
                MethodResult::new(r.method.clone(), setting, tasks)
            })
            .collect()
    }

    /// References taken from the FT and FE rows.
    pub fn references(&self, setting: Setting) -> Result<ReferenceAccuracies> {
        let s = self.setting(setting)?;
        let row = |m: &str| {
            s.rows
                .iter()
                .find(|r| r.method == m)
                .ok_or_else(|| Error::InconsistentTasks(format!("no {m} row for {setting}")))
        };
        let (ft, fe) = (row("FT")?, row("FE")?);
        let tasks = self
            .tasks
            .iter()
            .enumerate()
            .map(|(i, id)| TaskReference {
                task_id: id.clone(),
                alpha_ft: self.accuracy_unit.to_fraction(ft.accuracy[i]),
                alpha_fe: self.accuracy_unit.to_fraction(fe.accuracy[i]),
            })
            .collect();
        ReferenceAccuracies::new(setting, tasks)
    }
}

/// One recomputed cell next to its expectation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellComparison {
    pub setting: Setting,
    pub method: String,
    pub metric: Metric,
    pub computed: f64,
    pub expected: f64,
    /// The printed value, when it differs from `expected`'s source.
    pub printed: f64,
    pub delta: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Reproduction {
    pub reports: Vec<ScoreReport>,
    pub cells: Vec<CellComparison>,
}

impl Table2Reproduction {
    pub fn cells_for(&self, metric: Metric) -> impl Iterator<Item = &CellComparison> {
        self.cells.iter().filter(move |c| c.metric == metric)
    }

    pub fn all_pass(&self, metric: Metric) -> bool {
        self.cells_for(metric).all(|c| c.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CellComparison> {
        self.cells.iter().filter(|c| !c.pass)
    }
}

/// Recomputes every score cell from the accuracy table and memory ratios.
///
/// AvgA (in percent), DS and LL are compared with the printed cells. RevDS is
/// compared with its closed form for a single shared ratio,
/// `DS·λ^(−c·ρ)`, because the printed RevDS column does not follow from the
/// printed formula.
pub fn reproduce_table2(tables: &PublishedTables, cfg: &ScoringConfig) -> Result<Table2Reproduction> {
    let mut reports = Vec::new();
    let mut cells = Vec::new();
    for s in &tables.settings {
        let results = tables.results(s.setting)?;
        let refs = tables.references(s.setting)?;
        let report = leaderboard(&results, &refs, cfg)?;
        for row in &s.rows {
            let m = report
                .method(&row.method)
                .ok_or_else(|| Error::Internal(format!("{} missing from report", row.method)))?;
            let mut push = |metric, computed: f64, expected: f64, printed: f64, tolerance: f64| {
                let delta = computed - expected;
                cells.push(CellComparison {
                    setting: s.setting,
                    method: row.method.clone(),
                    metric,
                    computed,
                    expected,
                    printed,
                    delta,
                    tolerance,
                    pass: delta.abs() <= tolerance + EDGE,
                });
            };
            push(Metric::AvgA, 100.0 * m.avga, row.printed.avga, row.printed.avga, AVGA_TOLERANCE_PP);
            push(Metric::Ds, m.ds, row.printed.ds, row.printed.ds, DS_TOLERANCE);
            let literal = m.ds * cfg.lambda.powf(-cfg.revds_exponent_scale * row.par);
            push(
                Metric::RevDs,
                m.revds,
                literal,
                row.printed.revds,
                REVDS_REL_TOLERANCE * literal.abs().max(1.0),
            );
            push(Metric::Ll, m.ll, row.printed.ll, row.printed.ll, LL_TOLERANCE);
        }
        reports.push(report);
    }
    Ok(Table2Reproduction { reports, cells })
}
