//! Aggregate statistics over result rows.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::hierarchy::Estimate;
use crate::results::{ResultRow, STAGE_COLUMNS};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub stage: usize,
    /// Queries answered by this stage.
    pub accepted: usize,
    pub fraction: f64,
    /// Queries in which this stage was evaluated, accepted or not.
    pub evaluations: usize,
    pub total_eval_s: f64,
    /// Zero when the stage was never evaluated.
    pub mean_eval_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub queries: usize,
    pub stages: Vec<StageStats>,
    /// Adaptation events keyed `source>target`.
    pub events: BTreeMap<String, usize>,
    pub total_eval_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QoiStats {
    pub mean: f64,
    /// Mean of the per-row estimates, with reference rows counting as zero.
    /// Times the QoI continuity constant, this bounds the error of `mean`.
    pub mean_estimate: f64,
    pub max_estimate: f64,
    pub surrogate_rows: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsSummary {
    pub all: Segment,
    pub first_half: Segment,
    pub second_half: Segment,
    pub qoi: QoiStats,
    /// Wall time of the whole stream; unknown when read back from a file.
    pub wall_s: Option<f64>,
}

impl StatsSummary {
    pub fn to_json(&self) -> crate::Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

fn segment(rows: &[ResultRow]) -> Segment {
    let mut stages: Vec<StageStats> = (1..=STAGE_COLUMNS)
        .map(|stage| StageStats {
            stage,
            ..Default::default()
        })
        .collect();
    let mut events = BTreeMap::new();
    for row in rows {
        if let Some(s) = stages.get_mut(row.stage - 1) {
            s.accepted += 1;
        }
        for (s, d) in stages.iter_mut().zip(&row.durations) {
            if let Some(d) = d {
                s.evaluations += 1;
                s.total_eval_s += d;
            }
        }
        for (src, tgt) in &row.events {
            *events.entry(format!("{src}>{tgt}")).or_insert(0) += 1;
        }
    }
    let n = rows.len();
    for s in &mut stages {
        if n > 0 {
            s.fraction = s.accepted as f64 / n as f64;
        }
        if s.evaluations > 0 {
            s.mean_eval_s = s.total_eval_s / s.evaluations as f64;
        }
    }
    Segment {
        queries: n,
        total_eval_s: stages.iter().map(|s| s.total_eval_s).sum(),
        stages,
        events,
    }
}

fn qoi_stats(rows: &[ResultRow]) -> QoiStats {
    if rows.is_empty() {
        return QoiStats::default();
    }
    let n = rows.len() as f64;
    let estimates = rows.iter().map(|r| r.estimate.value().unwrap_or(0.0));
    QoiStats {
        mean: rows.iter().map(|r| r.qoi).sum::<f64>() / n,
        mean_estimate: estimates.clone().sum::<f64>() / n,
        max_estimate: estimates.fold(0.0, f64::max),
        surrogate_rows: rows
            .iter()
            .filter(|r| !matches!(r.estimate, Estimate::Reference))
            .count(),
    }
}

/// Summarizes a stream; halves split at `len / 2`.
pub fn summarize(rows: &[ResultRow], wall_s: Option<f64>) -> StatsSummary {
    let mid = rows.len() / 2;
    StatsSummary {
        all: segment(rows),
        first_half: segment(&rows[..mid]),
        second_half: segment(&rows[mid..]),
        qoi: qoi_stats(rows),
        wall_s,
    }
}

fn events_text(events: &BTreeMap<String, usize>) -> String {
    if events.is_empty() {
        return "none".into();
    }
    events
        .iter()
        .map(|(k, v)| format!("{k}: {v}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Human-readable rendering. `qoi_constant` tightens the printed QoI bound
/// when known; the constant is at most one for the parabolic scenario.
pub fn render_text(summary: &StatsSummary, qoi_constant: Option<f64>) -> String {
    let mut out = String::new();
    let all = &summary.all;
    let _ = writeln!(out, "queries: {}", all.queries);
    let _ = writeln!(out, "stage  accepted  fraction  evaluations  mean_eval_s  total_eval_s");
    for s in &all.stages {
        let _ = writeln!(
            out,
            "{:>5}  {:>8}  {:>8.4}  {:>11}  {:>11.3e}  {:>12.3e}",
            s.stage, s.accepted, s.fraction, s.evaluations, s.mean_eval_s, s.total_eval_s
        );
    }
    let _ = writeln!(out, "adaptation events: {}", events_text(&all.events));
    for (name, half) in [("first half", &summary.first_half), ("second half", &summary.second_half)] {
        let counts: Vec<String> = half.stages.iter().map(|s| s.accepted.to_string()).collect();
        let _ = writeln!(
            out,
            "{name} ({} queries): accepted per stage [{}], events {}",
            half.queries,
            counts.join(", "),
            events_text(&half.events)
        );
    }
    let c = qoi_constant.unwrap_or(1.0);
    let _ = writeln!(
        out,
        "qoi mean: {:.10e} +/- {:.3e} (constant {c}, {} surrogate rows, max estimate {:.3e})",
        summary.qoi.mean,
        c * summary.qoi.mean_estimate,
        summary.qoi.surrogate_rows,
        summary.qoi.max_estimate
    );
    if let Some(w) = summary.wall_s {
        let _ = writeln!(out, "wall time: {w:.3} s");
    }
    out
}
