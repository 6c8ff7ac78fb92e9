//! Shape-dictionary CSV: one file per axis, label-ordered rows, one column
//! per training sample. Header is `label,s0,s1,...`; each row holds the
//! label and that landmark's coordinate in every training sample. The three
//! axis files must agree on labels and sample count.

use std::path::Path;

use super::{fmt_f64, FormatError};
use crate::sparse::{CoordMatrix, ShapeDictionary};

const FORMAT: &str = "dictionary-csv";
const AXIS_NAMES: [&str; 3] = ["x", "y", "z"];

pub fn write_dictionary(paths: [&Path; 3], dict: &ShapeDictionary) -> Result<(), FormatError> {
    for (axis, path) in paths.iter().enumerate() {
        let mat = dict.axis(axis);
        let mut out = String::from("label");
        for s in 0..dict.atoms() {
            out.push_str(&format!(",s{s}"));
        }
        out.push('\n');
        for (r, label) in dict.labels().iter().enumerate() {
            out.push_str(label);
            for c in 0..dict.atoms() {
                out.push(',');
                out.push_str(&fmt_f64(mat.at(r, c)));
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| FormatError::io(path, e))?;
    }
    Ok(())
}

pub fn read_dictionary(paths: [&Path; 3]) -> Result<ShapeDictionary, FormatError> {
    let mut labels: Option<Vec<String>> = None;
    let mut axes = Vec::with_capacity(3);
    for (axis, path) in paths.iter().enumerate() {
        let (file_labels, mat) = read_axis(path)?;
        match &labels {
            None => labels = Some(file_labels),
            Some(expect) => {
                if *expect != file_labels {
                    return Err(FormatError::malformed(
                        path,
                        FORMAT,
                        format!("{} axis labels disagree with {} axis", AXIS_NAMES[axis], AXIS_NAMES[0]),
                    ));
                }
            }
        }
        axes.push(mat);
    }
    let z = axes.pop().expect("three axes parsed");
    let y = axes.pop().expect("three axes parsed");
    let x = axes.pop().expect("three axes parsed");
    ShapeDictionary::new(labels.expect("three axes parsed"), x, y, z)
        .map_err(|e| FormatError::malformed(paths[0], FORMAT, e.to_string()))
}

fn read_axis(path: &Path) -> Result<(Vec<String>, CoordMatrix), FormatError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let atoms = {
        let headers = reader.headers().map_err(|e| csv_error(path, e))?;
        let got: Vec<&str> = headers.iter().collect();
        if got.first() != Some(&"label") || got.len() < 2 {
            return Err(FormatError::malformed(
                path,
                FORMAT,
                format!("bad header row {got:?}"),
            ));
        }
        for (s, name) in got[1..].iter().enumerate() {
            if *name != format!("s{s}") {
                return Err(FormatError::malformed(
                    path,
                    FORMAT,
                    format!("bad header row {got:?}"),
                ));
            }
        }
        got.len() - 1
    };
    let mut labels = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (n, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        if record.len() != atoms + 1 {
            return Err(FormatError::malformed(
                path,
                FORMAT,
                format!(
                    "row {}: expected {} fields, got {}",
                    n + 2,
                    atoms + 1,
                    record.len()
                ),
            ));
        }
        labels.push(record[0].to_string());
        let mut row = Vec::with_capacity(atoms);
        for c in 0..atoms {
            let v: f64 = record[c + 1].parse().map_err(|_| {
                FormatError::malformed(
                    path,
                    FORMAT,
                    format!("row {}: bad coordinate {:?}", n + 2, &record[c + 1]),
                )
            })?;
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(FormatError::malformed(path, FORMAT, "no landmark rows"));
    }
    let mut mat = CoordMatrix::zeros(rows.len(), atoms);
    for (r, row) in rows.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            mat.set(r, c, *v);
        }
    }
    Ok((labels, mat))
}

fn csv_error(path: &Path, e: csv::Error) -> FormatError {
    FormatError::malformed(path, FORMAT, e.to_string())
}
