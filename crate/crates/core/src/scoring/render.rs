//! Leaderboard output: an aligned text table for people, CSV for machines.
//!
//! The text table prints accuracies in percent with one decimal and scores
//! as rounded integers; `*` marks the best method under a metric and `+` the
//! second best. CSV cells carry full precision.

use std::fmt::Write as _;

use super::published::Table2Reproduction;
use super::{Marker, Metric, ScoreReport, TaskBreakdown};
use crate::error::{Error, Result};

fn fmt_metric(metric: Metric, v: f64) -> String {
    match metric {
        Metric::AvgA => format!("{:.1}", 100.0 * v),
        _ => format!("{}", v.round() as i64),
    }
}

fn marker_suffix(m: Option<Marker>) -> &'static str {
    match m {
        Some(Marker::Best) => "*",
        Some(Marker::Second) => "+",
        None => "",
    }
}

fn push_row(out: &mut String, cells: &[String], widths: &[usize]) {
    let mut line = String::new();
    for (i, (c, w)) in cells.iter().zip(widths).enumerate() {
        if i > 0 {
            line.push_str("  ");
        }
        if i == 0 {
            let _ = write!(line, "{c:<w$}");
        } else {
            let _ = write!(line, "{c:>w$}");
        }
    }
    out.push_str(line.trim_end());
    out.push('\n');
}

fn table(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, r) in rows.iter().enumerate() {
        push_row(&mut out, r, &widths);
        if i == 0 {
            let total = widths.iter().sum::<usize>() + 2 * widths.len().saturating_sub(1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}

/// Aligned table: method, mean ratio, per-task accuracy and the selected
/// metrics.
pub fn render_text(report: &ScoreReport, metrics: &[Metric]) -> String {
    let mut rows = Vec::with_capacity(report.methods.len() + 1);
    let mut header = vec![format!("{}", report.setting), "Par".to_owned()];
    header.extend(report.task_ids.iter().cloned());
    header.extend(metrics.iter().map(|m| m.label().to_owned()));
    rows.push(header);
    for m in &report.methods {
        let mut row = vec![m.method.clone(), format!("{:.2}", m.mean_ratio())];
        for id in &report.task_ids {
            let t = m.tasks.iter().find(|t| &t.task_id == id);
            row.push(t.map_or_else(String::new, |t| format!("{:.1}", 100.0 * t.accuracy)));
        }
        for &metric in metrics {
            row.push(format!(
                "{}{}",
                fmt_metric(metric, m.get(metric)),
                marker_suffix(report.marker(metric, &m.method))
            ));
        }
        rows.push(row);
    }
    let mut out = table(&rows);
    out.push_str("* best  + second best\n");
    out
}

fn breakdown_columns(metrics: &[Metric]) -> Vec<(&'static str, fn(&TaskBreakdown) -> f64)> {
    let mut cols: Vec<(&'static str, fn(&TaskBreakdown) -> f64)> = Vec::new();
    let mut add = |name, f| {
        if !cols.iter().any(|(n, _)| *n == name) {
            cols.push((name, f));
        }
    };
    for m in metrics {
        match m {
            Metric::AvgA => {}
            Metric::Ds => {
                add("alpha_min", |t| t.alpha_min);
                add("eta", |t| t.eta);
            }
            Metric::RevDs => {
                add("alpha_min", |t| t.alpha_min);
                add("eta", |t| t.eta);
                add("memory_penalty", |t| t.memory_penalty);
            }
            Metric::Ll => {
                add("R", |t| t.r);
                add("A", |t| t.a);
            }
        }
    }
    cols
}

/// One line per (setting, method): the selected metrics, their ranks and the
/// per-task breakdown columns those metrics depend on.
pub fn render_csv(reports: &[ScoreReport], metrics: &[Metric]) -> Result<String> {
    let first = reports.first().ok_or(Error::Empty("reports"))?;
    let task_ids = &first.task_ids;
    let breakdown = breakdown_columns(metrics);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["setting".to_owned(), "method".to_owned(), "par".to_owned()];
    for m in metrics {
        header.push(m.key().to_owned());
        header.push(format!("{}_rank", m.key()));
    }
    for id in task_ids {
        for (name, _) in &breakdown {
            header.push(format!("{id}:{name}"));
        }
    }
    w.write_record(&header)?;
    for report in reports {
        if &report.task_ids != task_ids {
            return Err(Error::InconsistentTasks("reports cover different task sets".into()));
        }
        for m in &report.methods {
            let mut rec = vec![report.setting.to_string(), m.method.clone(), m.mean_ratio().to_string()];
            for &metric in metrics {
                rec.push(m.get(metric).to_string());
                let rank = report.rankings[&metric]
                    .iter()
                    .find(|e| e.method == m.method)
                    .map(|e| e.rank)
                    .unwrap_or(0);
                rec.push(rank.to_string());
            }
            for id in task_ids {
                let t = m
                    .tasks
                    .iter()
                    .find(|t| &t.task_id == id)
                    .ok_or_else(|| Error::InconsistentTasks(format!("{} lacks `{id}`", m.method)))?;
                for (_, f) in &breakdown {
                    rec.push(f(t).to_string());
                }
            }
            w.write_record(&rec)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Internal(e.to_string()))
}

/// Per-cell comparison listing followed by a pass/fail summary per metric.
pub fn render_reproduction(rep: &Table2Reproduction) -> String {
    let mut rows = vec![[
        "setting", "method", "metric", "computed", "expected", "printed", "delta", "tol", "status",
    ]
    .map(str::to_owned)
    .to_vec()];
    for c in &rep.cells {
        rows.push(vec![
            c.setting.to_string(),
            c.method.clone(),
            c.metric.label().to_owned(),
            format!("{:.2}", c.computed),
            format!("{:.2}", c.expected),
            format!("{}", c.printed),
            format!("{:+.2}", c.delta),
            format!("{}", c.tolerance),
            if c.pass { "ok" } else { "FAIL" }.to_owned(),
        ]);
    }
    let mut out = table(&rows);
    for metric in Metric::ALL {
        let total = rep.cells_for(metric).count();
        let ok = rep.cells_for(metric).filter(|c| c.pass).count();
        let _ = writeln!(out, "{}: {ok}/{total} cells within tolerance", metric.label());
    }
    out
}
