//! Evaluation report CSV: one row per (region, method) pair with header
//! `region,method,mean_mm,std_mm,id_rate`. Absent statistics (a region with
//! no errors or no targets) are empty cells, never zeros.

use std::path::Path;

use super::{fmt_f64, FormatError};

const FORMAT: &str = "report-csv";
const HEADER: [&str; 5] = ["region", "method", "mean_mm", "std_mm", "id_rate"];

/// One emitted report row.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub region: String,
    /// Ablation tag, e.g. `net-only`, `+mp`, `+mp+sparsity`.
    pub method: String,
    pub mean_mm: Option<f64>,
    pub std_mm: Option<f64>,
    pub id_rate: Option<f64>,
}

fn cell(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<(), FormatError> {
    let mut out = String::from("region,method,mean_mm,std_mm,id_rate\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.region,
            row.method,
            cell(row.mean_mm),
            cell(row.std_mm),
            cell(row.id_rate),
        ));
    }
    std::fs::write(path, out).map_err(|e| FormatError::io(path, e))
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>, FormatError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    {
        let headers = reader.headers().map_err(|e| csv_error(path, e))?;
        let got: Vec<&str> = headers.iter().collect();
        if got != HEADER {
            return Err(FormatError::malformed(
                path,
                FORMAT,
                format!("bad header row {got:?}"),
            ));
        }
    }
    let mut rows = Vec::new();
    for (n, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        if record.len() != 5 {
            return Err(FormatError::malformed(
                path,
                FORMAT,
                format!("row {}: expected 5 fields, got {}", n + 2, record.len()),
            ));
        }
        let parse = |field: &str| -> Result<Option<f64>, FormatError> {
            if field.is_empty() {
                return Ok(None);
            }
            field.parse().map(Some).map_err(|_| {
                FormatError::malformed(
                    path,
                    FORMAT,
                    format!("row {}: bad number {field:?}", n + 2),
                )
            })
        };
        rows.push(ReportRow {
            region: record[0].to_string(),
            method: record[1].to_string(),
            mean_mm: parse(&record[2])?,
            std_mm: parse(&record[3])?,
            id_rate: parse(&record[4])?,
        });
    }
    Ok(rows)
}

fn csv_error(path: &Path, e: csv::Error) -> FormatError {
    FormatError::malformed(path, FORMAT, e.to_string())
}
