//! One CSV row per answered query.
//!
//! Header: `query_id,mu_1..mu_Q,stage,estimate,qoi,dur_s1,dur_s2,dur_s3,basis_n,ml_n,events`.
//! `estimate` is a decimal or `ref`; a duration is empty when its stage was
//! not evaluated; `events` lists `source>target` pairs separated by `;`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::hierarchy::{Estimate, QueryRecord};

/// Number of duration columns; stages beyond a hierarchy's depth stay empty.
pub const STAGE_COLUMNS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub query_id: u64,
    pub mu: Vec<f64>,
    pub stage: usize,
    pub estimate: Estimate,
    pub qoi: f64,
    /// Evaluation time of each stage that was attempted.
    pub durations: [Option<f64>; STAGE_COLUMNS],
    pub basis_n: usize,
    pub ml_n: usize,
    pub events: Vec<(usize, usize)>,
}

impl ResultRow {
    /// Builds a row from a hierarchy record. `stage_offset` shifts stage
    /// numbers, so a single-level baseline can report as the top stage of
    /// the full hierarchy.
    pub fn from_record<O>(
        record: &QueryRecord<O>,
        qoi: f64,
        stage_offset: usize,
        basis_n: usize,
        ml_n: usize,
    ) -> Self {
        let mut durations = [None; STAGE_COLUMNS];
        for attempt in &record.answer.attempts {
            if let Some(slot) = durations.get_mut(attempt.stage + stage_offset - 1) {
                *slot = Some(attempt.eval_s);
            }
        }
        ResultRow {
            query_id: record.query_id,
            mu: record.mu.values().to_vec(),
            stage: record.answer.stage + stage_offset,
            estimate: record.answer.estimate,
            qoi,
            durations,
            basis_n,
            ml_n,
            events: record
                .adaptation_events
                .iter()
                .map(|(s, t)| (s + stage_offset, t + stage_offset))
                .collect(),
        }
    }

    /// Row with durations cleared, for comparisons that ignore timing.
    pub fn without_durations(&self) -> Self {
        ResultRow {
            durations: [None; STAGE_COLUMNS],
            ..self.clone()
        }
    }
}

pub fn header(q: usize) -> Vec<String> {
    let mut h = vec!["query_id".to_string()];
    h.extend((1..=q).map(|i| format!("mu_{i}")));
    h.extend(["stage", "estimate", "qoi"].map(String::from));
    h.extend((1..=STAGE_COLUMNS).map(|i| format!("dur_s{i}")));
    h.extend(["basis_n", "ml_n", "events"].map(String::from));
    h
}

fn format_estimate(e: &Estimate) -> String {
    match e {
        Estimate::Value(v) => v.to_string(),
        Estimate::Reference => "ref".to_string(),
    }
}

fn format_events(events: &[(usize, usize)]) -> String {
    events
        .iter()
        .map(|(s, t)| format!("{s}>{t}"))
        .collect::<Vec<_>>()
        .join(";")
}

fn record_fields(row: &ResultRow) -> Vec<String> {
    let mut f = vec![row.query_id.to_string()];
    f.extend(row.mu.iter().map(f64::to_string));
    f.push(row.stage.to_string());
    f.push(format_estimate(&row.estimate));
    f.push(row.qoi.to_string());
    f.extend(row.durations.iter().map(|d| d.map(|v| v.to_string()).unwrap_or_default()));
    f.push(row.basis_n.to_string());
    f.push(row.ml_n.to_string());
    f.push(format_events(&row.events));
    f
}

/// Writes the header for `q` parameters and every row.
pub fn write_rows<W: Write>(out: W, q: usize, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header(q))?;
    for row in rows {
        if row.mu.len() != q {
            return Err(Error::DimensionMismatch {
                expected: q,
                found: row.mu.len(),
            });
        }
        w.write_record(record_fields(row))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_rows_to(path: &Path, q: usize, rows: &[ResultRow]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_rows(std::io::BufWriter::new(file), q, rows)
}

fn bad(row: usize, what: impl std::fmt::Display) -> Error {
    Error::Parse(format!("row {row}: {what}"))
}

fn parse_num<T: std::str::FromStr>(row: usize, column: &str, s: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| bad(row, format!("column {column}: cannot parse '{s}'")))
}

fn parse_float(row: usize, column: &str, s: &str) -> Result<f64> {
    let v: f64 = parse_num(row, column, s)?;
    if !v.is_finite() {
        return Err(bad(row, format!("column {column}: '{s}' is not finite")));
    }
    Ok(v)
}

fn parse_events(row: usize, s: &str) -> Result<Vec<(usize, usize)>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|pair| {
            let (a, b) = pair
                .split_once('>')
                .ok_or_else(|| bad(row, format!("event '{pair}' is not of the form source>target")))?;
            Ok((parse_num(row, "events", a)?, parse_num(row, "events", b)?))
        })
        .collect()
}

/// Parses a results file. Returns the number of parameter columns and the
/// rows. Errors name the first bad data row (1-based).
pub fn read_rows<R: Read>(input: R) -> Result<(usize, Vec<ResultRow>)> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let head: Vec<String> = r
        .headers()
        .map_err(|e| match e.is_io_error() {
            true => Error::Csv(e),
            false => Error::Parse(format!("header: {e}")),
        })?
        .iter().map(str::to_string).collect();
    let fixed = 1 + 3 + STAGE_COLUMNS + 3;
    if head.len() < fixed {
        return Err(Error::Parse(format!("header has {} columns, expected at least {fixed}", head.len())));
    }
    let q = head.len() - fixed;
    if head != header(q) {
        return Err(Error::Parse(format!("unexpected header: {}", head.join(","))));
    }

    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let n = i + 1;
        let rec = rec.map_err(|e| bad(n, e))?;
        if rec.len() != head.len() {
            return Err(bad(n, format!("{} fields, expected {}", rec.len(), head.len())));
        }
        let mut col = 0;
        let mut next = || {
            col += 1;
            (head[col - 1].as_str(), &rec[col - 1])
        };
        let (c, s) = next();
        let query_id = parse_num(n, c, s)?;
        let mut mu = Vec::with_capacity(q);
        for _ in 0..q {
            let (c, s) = next();
            mu.push(parse_float(n, c, s)?);
        }
        let (c, s) = next();
        let stage: usize = parse_num(n, c, s)?;
        if !(1..=STAGE_COLUMNS).contains(&stage) {
            return Err(bad(n, format!("stage {stage} out of range")));
        }
        let (c, s) = next();
        let estimate = if s.trim() == "ref" {
            Estimate::Reference
        } else {
            let v = parse_float(n, c, s)?;
            if v < 0.0 {
                return Err(bad(n, format!("negative estimate {v}")));
            }
            Estimate::Value(v)
        };
        let (c, s) = next();
        let qoi = parse_float(n, c, s)?;
        let mut durations = [None; STAGE_COLUMNS];
        for d in durations.iter_mut() {
            let (c, s) = next();
            if !s.trim().is_empty() {
                *d = Some(parse_float(n, c, s)?);
            }
        }
        let (c, s) = next();
        let basis_n = parse_num(n, c, s)?;
        let (c, s) = next();
        let ml_n = parse_num(n, c, s)?;
        let (_, s) = next();
        let events = parse_events(n, s)?;
        rows.push(ResultRow {
            query_id,
            mu,
            stage,
            estimate,
            qoi,
            durations,
            basis_n,
            ml_n,
            events,
        });
    }
    Ok((q, rows))
}

pub fn read_rows_from(path: &Path) -> Result<(usize, Vec<ResultRow>)> {
    read_rows(std::fs::File::open(path)?)
}
