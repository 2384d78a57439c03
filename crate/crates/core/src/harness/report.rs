//! Report rows and their CSV / JSON-lines persistence.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::FieldRecord;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// One aggregated result line. Prefix-attack rows fill the ASR_* and
/// attempts/tokens/time columns; semantic rows fill category, asr,
/// probes_mean and budget_probes; defense rows additionally carry
/// field_recovery. Unused columns stay empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub experiment: String,
    pub kind: String,
    pub strategy: String,
    pub regime: String,
    pub defense: String,
    pub category: String,
    pub victims: u64,
    pub asr_disease: Option<f64>,
    pub asr_symptoms: Option<f64>,
    pub asr_all: Option<f64>,
    pub asr: Option<f64>,
    pub field_recovery: Option<f64>,
    pub attempts_mean: Option<f64>,
    pub attempts_std: Option<f64>,
    pub tokens_mean: Option<f64>,
    pub tokens_std: Option<f64>,
    pub time_s_mean: Option<f64>,
    pub time_s_std: Option<f64>,
    pub probes_mean: Option<f64>,
    pub budget_probes: Option<u64>,
}

impl ReportRow {
    pub fn empty(experiment: &str, kind: &str) -> Self {
        ReportRow {
            experiment: experiment.to_string(),
            kind: kind.to_string(),
            strategy: String::new(),
            regime: String::new(),
            defense: String::new(),
            category: String::new(),
            victims: 0,
            asr_disease: None,
            asr_symptoms: None,
            asr_all: None,
            asr: None,
            field_recovery: None,
            attempts_mean: None,
            attempts_std: None,
            tokens_mean: None,
            tokens_std: None,
            time_s_mean: None,
            time_s_std: None,
            probes_mean: None,
            budget_probes: None,
        }
    }
}

/// Serializes rows to CSV with the fixed documented header.
pub fn rows_to_csv(rows: &[ReportRow]) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_report(rows: &[ReportRow], path: &Path) -> Result<(), ReportError> {
    // Header-only files still need the header row.
    let mut out = String::new();
    if rows.is_empty() {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.serialize(ReportRow::empty("", ""))?;
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        let full = String::from_utf8(bytes).unwrap();
        out.push_str(full.lines().next().unwrap());
        out.push('\n');
    } else {
        out = rows_to_csv(rows)?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>, ReportError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

/// JSON-lines mirror of the CSV report.
pub fn write_report_jsonl(rows: &[ReportRow], path: &Path) -> Result<(), ReportError> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// One JSON object per record, keyed by the six field names.
pub fn write_records_jsonl(records: &[FieldRecord], path: &Path) -> Result<(), ReportError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_jsonl(path: &Path) -> Result<Vec<FieldRecord>, ReportError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
