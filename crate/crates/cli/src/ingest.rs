//! CSV input: a header row of column names, then numeric cells.

use std::fmt;
use std::path::Path;

use gmm_audit_core::moments::Dataset;

#[derive(Debug, Clone, PartialEq)]
pub enum IngestError {
    Io(String),
    /// Structural problem: empty file, no data rows, ragged rows.
    Format(String),
    /// A cell that is not a finite number. `row` counts data rows from 1.
    Parse {
        row: usize,
        line: u64,
        column: String,
        value: String,
    },
}

impl IngestError {
    pub fn kind(&self) -> &'static str {
        match self {
            IngestError::Io(_) => "io",
            IngestError::Format(_) => "format",
            IngestError::Parse { .. } => "parse",
        }
    }
}

impl fmt::Display for IngestError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IngestError::Io(m) => write!(f, "cannot read data: {m}"),
            IngestError::Format(m) => write!(f, "malformed data file: {m}"),
            IngestError::Parse {
                row,
                line,
                column,
                value,
            } => write!(
                f,
                "row {row} (line {line}), column `{column}`: `{value}` is not a finite number"
            ),
        }
    }
}

impl std::error::Error for IngestError {}

pub fn ingest_csv(path: &Path) -> Result<Dataset, IngestError> {
    let file = std::fs::File::open(path).map_err(|e| IngestError::Io(format!("{}: {e}", path.display())))?;
    ingest_reader(file)
}

pub fn ingest_reader<R: std::io::Read>(reader: R) -> Result<Dataset, IngestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| IngestError::Format(e.to_string()))?.clone();
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        return Err(IngestError::Format("empty file: no header row".into()));
    }
    let columns: Vec<String> = header.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| IngestError::Format(e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        let mut row = Vec::with_capacity(columns.len());
        for (cell, column) in record.iter().zip(&columns) {
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => row.push(v),
                _ => {
                    return Err(IngestError::Parse {
                        row: i + 1,
                        line,
                        column: column.clone(),
                        value: cell.to_string(),
                    })
                }
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(IngestError::Format("header row but no data rows".into()));
    }
    Dataset::new(columns, rows).map_err(|e| IngestError::Format(e.to_string()))
}
