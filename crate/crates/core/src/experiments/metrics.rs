//! Metrics CSV: one row per evaluation report.
//!
//! The file opens with a `# metrics-schema: <n>` line followed by a header
//! row. Missing task accuracies are empty cells.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalReport;

pub const SCHEMA_VERSION: u32 = 1;
pub const HEADER: [&str; 8] = [
    "iter",
    "addition_acc",
    "subtraction_acc",
    "facts_acc",
    "combined",
    "holdout_correct",
    "val_loss",
    "lr",
];

/// One parsed metrics row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iter: u64,
    pub addition_acc: Option<f64>,
    pub subtraction_acc: Option<f64>,
    pub facts_acc: Option<f64>,
    pub combined: f64,
    pub holdout_correct: Option<usize>,
    pub val_loss: f64,
    pub lr: f64,
}

impl MetricsRow {
    pub fn arithmetic_perfect(&self) -> bool {
        self.addition_acc == Some(1.0) && self.subtraction_acc == Some(1.0)
    }
}

impl From<&EvalReport> for MetricsRow {
    fn from(r: &EvalReport) -> Self {
        Self {
            iter: r.iter,
            addition_acc: r.addition_acc,
            subtraction_acc: r.subtraction_acc,
            facts_acc: r.facts_acc,
            combined: r.combined_score,
            holdout_correct: r.holdout_correct,
            val_loss: r.val_loss,
            lr: r.lr,
        }
    }
}

fn acc(v: Option<f64>) -> String {
    v.map(|a| format!("{a:.4}")).unwrap_or_default()
}

fn record(row: &MetricsRow) -> [String; 8] {
    [
        row.iter.to_string(),
        acc(row.addition_acc),
        acc(row.subtraction_acc),
        acc(row.facts_acc),
        format!("{:.4}", row.combined),
        row.holdout_correct.map(|h| h.to_string()).unwrap_or_default(),
        format!("{:.6}", row.val_loss),
        format!("{:.6e}", row.lr),
    ]
}

/// Appends rows to a metrics file, flushing after each.
pub struct MetricsWriter {
    inner: csv::Writer<std::fs::File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "# metrics-schema: {SCHEMA_VERSION}")?;
        let mut inner = csv::WriterBuilder::new().from_writer(file);
        inner.write_record(HEADER)?;
        inner.flush()?;
        Ok(Self { inner })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner.write_record(record(row))?;
        self.inner.flush()?;
        Ok(())
    }
}

/// Renders rows exactly as [`MetricsWriter`] would.
pub fn to_string(rows: &[MetricsRow]) -> Result<String> {
    let mut out = format!("# metrics-schema: {SCHEMA_VERSION}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(HEADER)?;
        for row in rows {
            w.write_record(record(row))?;
        }
        w.flush()?;
    }
    String::from_utf8(out).map_err(|e| Error::Invalid(e.to_string()))
}

pub fn parse(text: &str) -> Result<Vec<MetricsRow>> {
    let first = text.lines().next().unwrap_or("");
    let version = first
        .strip_prefix("# metrics-schema:")
        .and_then(|v| v.trim().parse::<u32>().ok())
        .ok_or_else(|| Error::Invalid("metrics file lacks a schema line".into()))?;
    if version != SCHEMA_VERSION {
        return Err(Error::Invalid(format!("unsupported metrics schema {version}")));
    }
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != HEADER {
        return Err(Error::Invalid(format!("unexpected metrics header {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in reader.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

pub fn read(path: &Path) -> Result<Vec<MetricsRow>> {
    parse(&std::fs::read_to_string(path)?)
}
