//! On-disk artifact formats.
//!
//! Binary artifacts share one layout: a small text header (`key value...`
//! lines, first line `spinemark <format> <version>`) plus a sibling `.raw`
//! file holding little-endian float32 payload. Tabular artifacts are plain
//! CSV with a fixed header row. All writers are deterministic: the same
//! in-memory value always produces the same bytes.

mod dictionary;
mod header;
mod kernels;
mod landmarks;
mod logs;
mod manifest;
mod model;
mod report;
mod volume;

pub use dictionary::{read_dictionary, write_dictionary};
pub use kernels::{read_kernels, write_kernels};
pub use landmarks::{read_landmarks, write_landmarks};
pub use logs::{read_training_log, write_training_log};
pub use manifest::{read_manifest, write_manifest, ManifestEntry};
pub use model::{read_model, write_model};
pub use report::{read_report, write_report, ReportRow};
pub use volume::{read_volume, write_volume};

use std::path::{Path, PathBuf};
use thiserror::Error;

/// Format names and versions of every artifact this build reads or writes.
pub const FORMAT_VERSIONS: &[(&str, u32)] = &[
    ("volume", 1),
    ("model", 1),
    ("kernel-bundle", 1),
    ("landmarks-csv", 1),
    ("manifest-csv", 1),
    ("dictionary-csv", 1),
    ("training-log-csv", 1),
    ("report-csv", 1),
    ("config", 1),
];

/// Errors from reading or writing artifacts.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed {format}: {reason}")]
    Malformed {
        path: PathBuf,
        format: &'static str,
        reason: String,
    },
    #[error("{path}: payload holds {got} bytes, expected {expect}")]
    SizeMismatch {
        path: PathBuf,
        expect: u64,
        got: u64,
    },
}

impl FormatError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> FormatError {
        FormatError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn malformed(
        path: &Path,
        format: &'static str,
        reason: impl Into<String>,
    ) -> FormatError {
        FormatError::Malformed {
            path: path.to_path_buf(),
            format,
            reason: reason.into(),
        }
    }
}

/// Payload path belonging to a header path: same stem, `.raw` extension.
pub(crate) fn payload_path(header_path: &Path) -> PathBuf {
    header_path.with_extension("raw")
}

/// Reads a little-endian float32 payload of exactly `count` values.
pub(crate) fn read_f32_payload(path: &Path, count: usize) -> Result<Vec<f64>, FormatError> {
    let bytes = std::fs::read(path).map_err(|e| FormatError::io(path, e))?;
    let expect = count as u64 * 4;
    if bytes.len() as u64 != expect {
        return Err(FormatError::SizeMismatch {
            path: path.to_path_buf(),
            expect,
            got: bytes.len() as u64,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Writes values as little-endian float32.
pub(crate) fn write_f32_payload(path: &Path, values: &[f64]) -> Result<(), FormatError> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| FormatError::io(path, e))
}

/// Formats floats for text artifacts: shortest string that parses back to
/// the same f64.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v}")
}
