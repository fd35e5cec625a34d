//! CSV logs, suite summaries and the `meta.json` sidecar.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! re-read value is bitwise identical and identical runs give identical files.
//! Anything time- or host-dependent goes to `meta.json` only.

use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use dualfete_core::trainer::MetricsRecord;
use serde::Serialize;

use crate::error::{HarnessError, Result};

pub const LOG: &str = "log.csv";
pub const SUMMARY: &str = "summary.csv";
pub const META: &str = "meta.json";

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

/// Write a trainer history with the standard column set.
pub fn write_log(path: &Path, history: &[MetricsRecord]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(MetricsRecord::COLUMNS)?;
    for rec in history {
        let mut row = vec![rec.step.to_string()];
        row.extend(rec.values().iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

/// A parsed numeric CSV: header plus rows of floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }
}

pub fn read_numeric_csv(path: &Path) -> Result<Table> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|v| v.parse::<f64>().map_err(|_| HarnessError::Format { path: path.into(), detail: format!("non-numeric value `{v}`") }))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(Table { header, rows })
}

/// One summary row: string keys followed by numeric values.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub keys: Vec<String>,
    pub values: Vec<f64>,
}

/// Summary table with a fixed schema per suite.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub key_columns: Vec<&'static str>,
    pub value_columns: Vec<&'static str>,
    pub rows: Vec<SummaryRow>,
}

impl Summary {
    pub fn new(key_columns: &[&'static str], value_columns: &[&'static str]) -> Self {
        Self { key_columns: key_columns.to_vec(), value_columns: value_columns.to_vec(), rows: Vec::new() }
    }

    pub fn push(&mut self, keys: Vec<String>, values: Vec<f64>) {
        assert_eq!(keys.len(), self.key_columns.len(), "summary key arity");
        assert_eq!(values.len(), self.value_columns.len(), "summary value arity");
        self.rows.push(SummaryRow { keys, values });
    }

    pub fn header(&self) -> Vec<&'static str> {
        self.key_columns.iter().chain(&self.value_columns).copied().collect()
    }

    pub fn value(&self, row: &SummaryRow, column: &str) -> Option<f64> {
        self.value_columns.iter().position(|c| *c == column).map(|i| row.values[i])
    }

    /// Rows whose first key column equals `key`.
    pub fn rows_for<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a SummaryRow> + 'a {
        self.rows.iter().filter(move |r| r.keys[0] == key)
    }

    /// Mean of `column` over the rows whose first key equals `key`.
    pub fn mean(&self, key: &str, column: &str) -> Option<f64> {
        let v: Vec<f64> = self.rows_for(key).filter_map(|r| self.value(r, column)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = writer(path)?;
        w.write_record(self.header())?;
        for r in &self.rows {
            let row: Vec<String> = r.keys.iter().cloned().chain(r.values.iter().map(f64::to_string)).collect();
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| HarnessError::io(path, e))
    }
}

#[derive(Debug, Serialize)]
struct Meta<'a> {
    command: &'a str,
    started_unix: f64,
    finished_unix: f64,
    wall_seconds: f64,
    host: String,
    version: &'static str,
}

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn host_name() -> String {
    std::env::var("HOSTNAME")
        .ok()
        .or_else(|| fs::read_to_string("/etc/hostname").ok().map(|s| s.trim().to_string()))
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

/// Timestamps and host go here so the data files stay reproducible.
pub fn write_meta(dir: &Path, command: &str, started_unix: f64) -> Result<()> {
    let finished = unix_now();
    let meta = Meta { command, started_unix, finished_unix: finished, wall_seconds: finished - started_unix, host: host_name(), version: env!("CARGO_PKG_VERSION") };
    write_json(&dir.join(META), &meta)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}
