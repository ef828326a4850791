//! Prediction JSONL and metric report JSON.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::MetricReport;
use crate::interval::{Candidate, Interval, PredictionSet, TimeUnit};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CandidateRecord {
    start_s: f64,
    end_s: f64,
    score: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionRecord {
    query_id: String,
    candidates: Vec<CandidateRecord>,
}

pub fn encode_predictions(sets: &[PredictionSet]) -> Result<String> {
    let mut out = String::new();
    for set in sets {
        let mut candidates = Vec::with_capacity(set.candidates().len());
        for c in set.candidates() {
            if c.interval.unit() != TimeUnit::Seconds {
                return Err(Error::UnitMismatch(c.interval.unit(), TimeUnit::Seconds));
            }
            candidates.push(CandidateRecord {
                start_s: c.interval.start(),
                end_s: c.interval.end(),
                score: c.score,
            });
        }
        let rec = PredictionRecord {
            query_id: set.query_id().to_string(),
            candidates,
        };
        out.push_str(&serde_json::to_string(&rec).map_err(|e| Error::invalid("predictions", e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

/// One prediction set per line, in file order; query ids must be unique.
pub fn parse_predictions(text: &str, path: &Path) -> Result<Vec<PredictionSet>> {
    let line_err = |line: usize, reason: String| Error::Line {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut seen = HashSet::new();
    let mut sets = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let rec: PredictionRecord = serde_json::from_str(raw).map_err(|e| line_err(line, e.to_string()))?;
        if !seen.insert(rec.query_id.clone()) {
            return Err(line_err(line, format!("duplicate query {}", rec.query_id)));
        }
        let candidates = rec
            .candidates
            .iter()
            .map(|c| {
                Ok(Candidate {
                    interval: Interval::seconds(c.start_s, c.end_s)?,
                    score: c.score,
                })
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| line_err(line, e.to_string()))?;
        sets.push(PredictionSet::new(rec.query_id, candidates).map_err(|e| line_err(line, e.to_string()))?);
    }
    Ok(sets)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionSet>> {
    parse_predictions(&super::read_text(path)?, path)
}

pub fn write_predictions(path: &Path, sets: &[PredictionSet]) -> Result<()> {
    super::write_atomic(path, encode_predictions(sets)?.as_bytes())
}

pub fn encode_report(report: &MetricReport) -> Result<String> {
    report.check_invariants()?;
    let mut s = serde_json::to_string_pretty(report).map_err(|e| Error::invalid("report", e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn parse_report(text: &str, path: &Path) -> Result<MetricReport> {
    let report: MetricReport = serde_json::from_str(text).map_err(|e| Error::format(path, e.to_string()))?;
    report.check_invariants().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(report)
}

pub fn read_report(path: &Path) -> Result<MetricReport> {
    parse_report(&super::read_text(path)?, path)
}

pub fn write_report(path: &Path, report: &MetricReport) -> Result<()> {
    super::write_atomic(path, encode_report(report)?.as_bytes())
}
