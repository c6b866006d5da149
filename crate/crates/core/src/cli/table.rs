//! Plot-ready tables written as CSV or JSON lines.

use std::path::Path;

use serde_json::{Map, Value};

use crate::error::{HarmoqError, Result};

use super::config::ReportFormat;

/// Rows sharing one column order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub rows: Vec<Map<String, Value>>,
}

fn csv_err(e: csv::Error) -> HarmoqError {
    HarmoqError::Format(format!("csv: {e}"))
}

fn cell_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(cell_text).collect::<Vec<_>>().join(";"),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

fn cell_value(s: &str) -> Value {
    if let Ok(i) = s.parse::<i64>() {
        return Value::from(i);
    }
    if let Ok(f) = s.parse::<f64>() {
        if f.is_finite() {
            return Value::from(f);
        }
    }
    match s {
        "true" => Value::Bool(true),
        "false" => Value::Bool(false),
        _ => Value::String(s.to_string()),
    }
}

impl Table {
    pub fn push(&mut self, row: Value) {
        if let Value::Object(map) = row {
            self.rows.push(map);
        }
    }

    fn columns(&self) -> Vec<String> {
        self.rows.first().map(|r| r.keys().cloned().collect()).unwrap_or_default()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let cols = self.columns();
        w.write_record(&cols).map_err(csv_err)?;
        for row in &self.rows {
            w.write_record(cols.iter().map(|c| row.get(c).map(cell_text).unwrap_or_default()))
                .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| HarmoqError::Format(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| HarmoqError::Format(e.to_string()))
    }

    pub fn to_jsonl(&self) -> String {
        self.rows.iter().map(|r| Value::Object(r.clone()).to_string() + "\n").collect()
    }

    pub fn render(&self, format: ReportFormat) -> Result<String> {
        match format {
            ReportFormat::Csv => self.to_csv(),
            ReportFormat::Jsonl => Ok(self.to_jsonl()),
        }
    }

    pub fn from_jsonl(text: &str) -> Result<Table> {
        let mut t = Table::default();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            match serde_json::from_str::<Value>(line) {
                Ok(Value::Object(map)) => t.rows.push(map),
                Ok(_) => return Err(HarmoqError::Format(format!("line {}: not a JSON object", n + 1))),
                Err(e) => return Err(HarmoqError::Format(format!("line {}: {e}", n + 1))),
            }
        }
        Ok(t)
    }

    pub fn from_csv(text: &str) -> Result<Table> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
        let mut t = Table::default();
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            t.rows.push(header.iter().cloned().zip(rec.iter().map(cell_value)).collect());
        }
        Ok(t)
    }

    /// Reads a table, choosing the parser from the file extension.
    pub fn read(path: &Path) -> Result<Table> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Table::from_csv(&text),
            Some("jsonl") | Some("json") => Table::from_jsonl(&text),
            _ => Err(HarmoqError::Format(format!("{}: expected a .csv or .jsonl file", path.display()))),
        }
    }
}
