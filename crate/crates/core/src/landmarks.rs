//! Ordered vertebra centroid sets.
//!
//! A landmark set lists centroids in chain order. Absent landmarks (outside
//! the field of view, or not detected) keep their slot so channel indices,
//! dictionary rows, and chain edges stay aligned.

use thiserror::Error;

use crate::labels::LabelChain;

/// Errors from landmark set construction.
#[derive(Debug, Error, PartialEq)]
pub enum LandmarkError {
    #[error("landmark set must not be empty")]
    Empty,
    #[error("duplicate label {0:?}")]
    DuplicateLabel(String),
    #[error("non-finite coordinate on label {0:?}")]
    NonFinite(String),
    #[error("labels do not follow the configured chain: {0}")]
    ChainMismatch(String),
}

/// One named centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct Landmark {
    pub label: String,
    pub position_mm: [f64; 3],
    pub present: bool,
}

impl Landmark {
    pub fn present(label: &str, position_mm: [f64; 3]) -> Landmark {
        Landmark {
            label: label.to_string(),
            position_mm,
            present: true,
        }
    }

    /// Placeholder entry for a landmark that is not in the data.
    pub fn absent(label: &str) -> Landmark {
        Landmark {
            label: label.to_string(),
            position_mm: [0.0; 3],
            present: false,
        }
    }
}

/// Centroids in chain order.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    entries: Vec<Landmark>,
}

impl LandmarkSet {
    /// Builds a set; labels must be unique and coordinates finite.
    pub fn new(entries: Vec<Landmark>) -> Result<LandmarkSet, LandmarkError> {
        if entries.is_empty() {
            return Err(LandmarkError::Empty);
        }
        for (i, e) in entries.iter().enumerate() {
            if entries[..i].iter().any(|p| p.label == e.label) {
                return Err(LandmarkError::DuplicateLabel(e.label.clone()));
            }
            if e.position_mm.iter().any(|v| !v.is_finite()) {
                return Err(LandmarkError::NonFinite(e.label.clone()));
            }
        }
        Ok(LandmarkSet { entries })
    }

    /// Checks that entries are exactly `chain`, in order.
    pub fn validate_chain(&self, chain: &LabelChain) -> Result<(), LandmarkError> {
        let got: Vec<&str> = self.entries.iter().map(|e| e.label.as_str()).collect();
        let want: Vec<&str> = chain.names().iter().map(|s| s.as_str()).collect();
        if got != want {
            return Err(LandmarkError::ChainMismatch(format!(
                "expected [{}], got [{}]",
                want.join(","),
                got.join(",")
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Landmark> {
        self.entries.iter()
    }

    pub fn entries(&self) -> &[Landmark] {
        &self.entries
    }

    pub fn get(&self, label: &str) -> Option<&Landmark> {
        self.entries.iter().find(|e| e.label == label)
    }

    pub fn labels(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.label.clone()).collect()
    }

    /// Number of present landmarks.
    pub fn present_count(&self) -> usize {
        self.entries.iter().filter(|e| e.present).count()
    }
}
