//! Line-delimited record formats and CSV report tables.
//!
//! Input records are one JSON object per line:
//!
//! ```text
//! {"id": "img-17", "probs": [0.1, 0.7, 0.2], "label": 1}
//! {"logits": [0.3, 2.1, -1.0]}
//! ```
//!
//! Exactly one of `probs` or `logits` must be present. `label` is a 0-based
//! class index. Blank lines are skipped.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::aps::ProbVector;
use crate::calibration::LabeledSample;
use crate::detector::{DetectorSummary, Verdict};
use crate::error::{Error, Result};
use crate::metrics::{temperature_apply, HistogramSpec, LogitVector};
use crate::simulator::{EntropyRow, SweepRow};

/// One input record.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

/// Validated record payload.
#[derive(Debug, Clone, PartialEq)]
pub enum Scores {
    Probs(ProbVector),
    Logits(LogitVector),
}

impl Scores {
    pub fn class_count(&self) -> usize {
        match self {
            Scores::Probs(p) => p.class_count(),
            Scores::Logits(z) => z.class_count(),
        }
    }

    /// Probabilities, applying `temperature` (default 1) to logits.
    pub fn to_probs(&self, temperature: Option<f64>) -> Result<ProbVector> {
        match self {
            Scores::Probs(p) => Ok(p.clone()),
            Scores::Logits(z) => temperature_apply(z, temperature.unwrap_or(1.0)),
        }
    }
}

impl SampleRecord {
    pub fn from_sample(sample: &LabeledSample, id: Option<String>) -> Self {
        Self {
            id,
            probs: Some(sample.probs.as_slice().to_vec()),
            logits: None,
            label: Some(sample.label),
        }
    }

    pub fn scores(&self) -> Result<Scores> {
        let scores = match (&self.probs, &self.logits) {
            (Some(p), None) => Scores::Probs(ProbVector::new(p.clone())?),
            (None, Some(z)) => Scores::Logits(LogitVector::new(z.clone())?),
            _ => {
                return Err(Error::Config(
                    "record needs exactly one of \"probs\" or \"logits\"".into(),
                ))
            }
        };
        if let Some(label) = self.label {
            if label >= scores.class_count() {
                return Err(Error::InvalidLabel {
                    label,
                    classes: scores.class_count(),
                });
            }
        }
        Ok(scores)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

/// Parses a single line (1-based `line` used in errors).
pub fn parse_record(text: &str, line: usize) -> Result<SampleRecord> {
    let record: SampleRecord = serde_json::from_str(text).map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })?;
    // Catch wrong payload shapes at parse time so the line number survives.
    record.scores().map_err(|e| match e {
        Error::Config(message) => Error::Parse { line, message },
        other => other,
    })?;
    Ok(record)
}

/// Reads every non-blank line of a record stream.
pub fn read_records<R: BufRead>(reader: R) -> Result<Vec<SampleRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record(&line, i + 1)?);
    }
    Ok(out)
}

/// Writes records as JSON lines.
pub fn write_records<W: Write>(mut out: W, records: &[SampleRecord]) -> std::io::Result<()> {
    for r in records {
        writeln!(out, "{}", r.to_json_line())?;
    }
    Ok(())
}

/// Output of `predict`, one per input record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub index: usize,
    pub epsilon: f64,
    pub set: Vec<usize>,
    pub size: usize,
    pub set_mass: f64,
    pub largest_softmax: f64,
    pub nse: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covered: Option<bool>,
}

/// Lines emitted by `monitor`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MonitorRecord {
    Verdict {
        index: u64,
        size: usize,
        window_mean: f64,
        verdict: Verdict,
    },
    Summary(DetectorSummary),
}

/// Reads JSON lines of any deserializable type.
pub fn read_json_lines<T, R>(reader: R) -> Result<Vec<T>>
where
    T: for<'de> Deserialize<'de>,
    R: BufRead,
{
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let parse = |message: String| Error::Parse {
            line: i + 1,
            message,
        };
        let line = line.map_err(|e| parse(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?);
    }
    Ok(out)
}

/// Set-size table row, grouped by epsilon then severity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SizeRow {
    pub epsilon: f64,
    pub severity: u8,
    pub n: usize,
    pub avg_set_size: f64,
    pub null_rate: f64,
    /// Empty in the CSV when the predictions carried no labels.
    pub coverage: Option<f64>,
}

/// Aggregates prediction records into one size-table row.
pub fn size_row(severity: u8, records: &[PredictionRecord]) -> Result<SizeRow> {
    let first = records.first().ok_or(Error::Empty("prediction records"))?;
    if records.iter().any(|r| r.epsilon != first.epsilon) {
        return Err(Error::Config(
            "prediction file mixes several epsilons".into(),
        ));
    }
    let n = records.len();
    let total: usize = records.iter().map(|r| r.size).sum();
    let nulls = records.iter().filter(|r| r.size == 0).count();
    let coverage = records
        .iter()
        .map(|r| r.covered)
        .collect::<Option<Vec<bool>>>()
        .map(|c| c.iter().filter(|&&x| x).count() as f64 / n as f64);
    Ok(SizeRow {
        epsilon: first.epsilon,
        severity,
        n,
        avg_set_size: total as f64 / n as f64,
        null_rate: nulls as f64 / n as f64,
        coverage,
    })
}

/// Mean NSE row for one severity, from prediction records.
pub fn entropy_row(severity: u8, records: &[PredictionRecord]) -> Result<EntropyRow> {
    if records.is_empty() {
        return Err(Error::Empty("prediction records"));
    }
    let n = records.len() as f64;
    Ok(EntropyRow {
        severity,
        mean_nse: records.iter().map(|r| r.nse).sum::<f64>() / n,
        mean_largest_softmax: records.iter().map(|r| r.largest_softmax).sum::<f64>() / n,
    })
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("csv output failed: {e}"))
}

fn write_csv<W: Write, T: Serialize>(out: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| csv_err(e.into()))
}

/// Columns: `epsilon,severity,n,avg_set_size,null_rate,coverage`.
pub fn write_size_csv<W: Write>(out: W, rows: &[SizeRow]) -> Result<()> {
    write_csv(out, rows)
}

/// Columns: `epsilon,severity,q_threshold,avg_set_size,null_rate,coverage`.
pub fn write_sweep_csv<W: Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    write_csv(out, rows)
}

/// Columns: `severity,mean_nse,mean_largest_softmax`.
pub fn write_entropy_csv<W: Write>(out: W, rows: &[EntropyRow]) -> Result<()> {
    write_csv(out, rows)
}

#[derive(Serialize)]
struct HistogramCsvRow<'a> {
    kind: &'static str,
    name: &'a str,
    lower: Option<f64>,
    upper: Option<f64>,
    value: f64,
}

/// Columns: `kind,name,lower,upper,value`. Bin rows (`kind = bin`) carry
/// their edges and count; marker rows (`kind = marker`) carry a name and
/// position.
pub fn write_histogram_csv<W: Write>(out: W, hist: &HistogramSpec) -> Result<()> {
    let mut rows = Vec::with_capacity(hist.bin_count + hist.markers.len());
    for (i, &count) in hist.counts.iter().enumerate() {
        let (lo, hi) = hist.bin_edges(i);
        rows.push(HistogramCsvRow {
            kind: "bin",
            name: "",
            lower: Some(lo),
            upper: Some(hi),
            value: count as f64,
        });
    }
    for m in &hist.markers {
        rows.push(HistogramCsvRow {
            kind: "marker",
            name: &m.name,
            lower: None,
            upper: None,
            value: m.value,
        });
    }
    write_csv(out, &rows)
}

/// Columns of the single-row monitor summary table.
pub fn write_summary_csv<W: Write>(out: W, summary: &DetectorSummary) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        samples_seen: u64,
        window_len: usize,
        window_mean: f64,
        window_null_rate: Option<f64>,
        alarm: bool,
        insufficient_fill: bool,
        first_alarm_at: Option<u64>,
        baseline_avg_size: f64,
        ratio_threshold: f64,
        alarm_level: f64,
    }
    let s = summary;
    write_csv(
        out,
        &[Row {
            samples_seen: s.samples_seen,
            window_len: s.window_len,
            window_mean: s.window_mean,
            window_null_rate: s.window_null_rate,
            alarm: s.alarm,
            insufficient_fill: s.insufficient_fill,
            first_alarm_at: s.first_alarm_at,
            baseline_avg_size: s.baseline_avg_size,
            ratio_threshold: s.ratio_threshold,
            alarm_level: s.alarm_level,
        }],
    )
}
