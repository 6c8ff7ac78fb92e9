//! Landmark CSV: `label,x_mm,y_mm,z_mm,present` with one row per label in
//! chain order. `present` is written as `1`/`0`; `true`/`false` are accepted
//! on read.

use std::path::Path;

use super::{fmt_f64, FormatError};
use crate::landmarks::{Landmark, LandmarkSet};

const FORMAT: &str = "landmarks-csv";
const HEADER: [&str; 5] = ["label", "x_mm", "y_mm", "z_mm", "present"];

pub fn write_landmarks(path: &Path, set: &LandmarkSet) -> Result<(), FormatError> {
    let mut out = String::from("label,x_mm,y_mm,z_mm,present\n");
    for lm in set.iter() {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            lm.label,
            fmt_f64(lm.position_mm[0]),
            fmt_f64(lm.position_mm[1]),
            fmt_f64(lm.position_mm[2]),
            if lm.present { 1 } else { 0 },
        ));
    }
    std::fs::write(path, out).map_err(|e| FormatError::io(path, e))
}

pub fn read_landmarks(path: &Path) -> Result<LandmarkSet, FormatError> {
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
    let mut entries = Vec::new();
    for (n, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        if record.len() != 5 {
            return Err(FormatError::malformed(
                path,
                FORMAT,
                format!("row {}: expected 5 fields, got {}", n + 2, record.len()),
            ));
        }
        let mut pos = [0.0f64; 3];
        for (a, p) in pos.iter_mut().enumerate() {
            *p = record[a + 1].parse().map_err(|_| {
                FormatError::malformed(
                    path,
                    FORMAT,
                    format!("row {}: bad coordinate {:?}", n + 2, &record[a + 1]),
                )
            })?;
        }
        let present = match &record[4] {
            "1" | "true" => true,
            "0" | "false" => false,
            other => {
                return Err(FormatError::malformed(
                    path,
                    FORMAT,
                    format!("row {}: bad present flag {other:?}", n + 2),
                ))
            }
        };
        entries.push(Landmark {
            label: record[0].to_string(),
            position_mm: pos,
            present,
        });
    }
    LandmarkSet::new(entries).map_err(|e| FormatError::malformed(path, FORMAT, e.to_string()))
}

fn csv_error(path: &Path, e: csv::Error) -> FormatError {
    FormatError::malformed(path, FORMAT, e.to_string())
}
