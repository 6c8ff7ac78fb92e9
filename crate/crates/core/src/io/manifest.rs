//! Dataset manifest CSV: `volume,landmarks` paths, relative to the manifest
//! file's directory so datasets relocate cleanly.

use std::path::{Path, PathBuf};

use super::FormatError;

const FORMAT: &str = "manifest-csv";

/// One dataset case: a volume header path and its landmark CSV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub volume: PathBuf,
    pub landmarks: PathBuf,
}

/// Writes a manifest; `entries` paths must already be relative to `path`'s
/// directory.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), FormatError> {
    let mut out = String::from("volume,landmarks\n");
    for e in entries {
        let vol = e.volume.to_str().ok_or_else(|| {
            FormatError::malformed(path, FORMAT, "volume path is not utf-8")
        })?;
        let lms = e.landmarks.to_str().ok_or_else(|| {
            FormatError::malformed(path, FORMAT, "landmarks path is not utf-8")
        })?;
        out.push_str(&format!("{vol},{lms}\n"));
    }
    std::fs::write(path, out).map_err(|e| FormatError::io(path, e))
}

/// Reads a manifest and resolves entries against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, FormatError> {
    let base = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| FormatError::malformed(path, FORMAT, e.to_string()))?;
    {
        let headers = reader
            .headers()
            .map_err(|e| FormatError::malformed(path, FORMAT, e.to_string()))?;
        let got: Vec<&str> = headers.iter().collect();
        if got != ["volume", "landmarks"] {
            return Err(FormatError::malformed(
                path,
                FORMAT,
                format!("bad header row {got:?}"),
            ));
        }
    }
    let mut entries = Vec::new();
    for (n, record) in reader.records().enumerate() {
        let record = record.map_err(|e| FormatError::malformed(path, FORMAT, e.to_string()))?;
        if record.len() != 2 {
            return Err(FormatError::malformed(
                path,
                FORMAT,
                format!("row {}: expected 2 fields, got {}", n + 2, record.len()),
            ));
        }
        entries.push(ManifestEntry {
            volume: base.join(&record[0]),
            landmarks: base.join(&record[1]),
        });
    }
    Ok(entries)
}
