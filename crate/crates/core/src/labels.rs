//! Vertebra label ordering and anatomical regions.
//!
//! The canonical chain runs head to foot: C1-C7, T1-T12, L1-L5, S1-S2
//! (26 labels). Pipelines may run on a contiguous subset; the chain order is
//! what message passing and the shape prior operate along.

use std::fmt;

/// Canonical head-to-foot label ordering.
pub const STANDARD_LABELS: [&str; 26] = [
    "C1", "C2", "C3", "C4", "C5", "C6", "C7", "T1", "T2", "T3", "T4", "T5", "T6", "T7", "T8",
    "T9", "T10", "T11", "T12", "L1", "L2", "L3", "L4", "L5", "S1", "S2",
];

/// Anatomical region a label belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    Cervical,
    Thoracic,
    Lumbar,
    Sacral,
}

impl Region {
    /// Region of a canonical label name, `None` for unknown names.
    pub fn of(label: &str) -> Option<Region> {
        if !STANDARD_LABELS.contains(&label) {
            return None;
        }
        match label.as_bytes()[0] {
            b'C' => Some(Region::Cervical),
            b'T' => Some(Region::Thoracic),
            b'L' => Some(Region::Lumbar),
            b'S' => Some(Region::Sacral),
            _ => None,
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Region::Cervical => "Cervical",
            Region::Thoracic => "Thoracic",
            Region::Lumbar => "Lumbar",
            Region::Sacral => "Sacral",
        };
        f.write_str(name)
    }
}

/// Error from parsing a label chain specification.
#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum LabelError {
    #[error("unknown label {0:?}")]
    Unknown(String),
    #[error("label {0:?} listed twice")]
    Duplicate(String),
    #[error("range {0:?}..{1:?} runs against the canonical order")]
    BackwardRange(String, String),
    #[error("label chain must not be empty")]
    Empty,
}

/// Ordered set of labels the pipeline operates on.
///
/// Always a subsequence of [`STANDARD_LABELS`]; index order equals chain
/// order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelChain {
    names: Vec<String>,
}

impl LabelChain {
    /// Full 26-label chain.
    pub fn standard() -> LabelChain {
        LabelChain {
            names: STANDARD_LABELS.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Parses a chain spec: either a contiguous range `"T1:T12"` or a comma
    /// list `"C1,C2,C3"`. Labels must be canonical, unique, and in canonical
    /// order.
    pub fn parse(spec: &str) -> Result<LabelChain, LabelError> {
        let spec = spec.trim();
        if spec.is_empty() {
            return Err(LabelError::Empty);
        }
        let names: Vec<String> = if let Some((lo, hi)) = spec.split_once(':') {
            let lo = lo.trim();
            let hi = hi.trim();
            let i = Self::canonical_index(lo)?;
            let j = Self::canonical_index(hi)?;
            if i > j {
                return Err(LabelError::BackwardRange(lo.to_string(), hi.to_string()));
            }
            STANDARD_LABELS[i..=j].iter().map(|s| s.to_string()).collect()
        } else {
            let mut names = Vec::new();
            let mut last = None;
            for part in spec.split(',') {
                let name = part.trim();
                let idx = Self::canonical_index(name)?;
                if names.iter().any(|n| n == name) {
                    return Err(LabelError::Duplicate(name.to_string()));
                }
                if let Some(prev) = last {
                    if idx < prev {
                        return Err(LabelError::BackwardRange(
                            STANDARD_LABELS[prev].to_string(),
                            name.to_string(),
                        ));
                    }
                }
                last = Some(idx);
                names.push(name.to_string());
            }
            names
        };
        if names.is_empty() {
            return Err(LabelError::Empty);
        }
        Ok(LabelChain { names })
    }

    fn canonical_index(name: &str) -> Result<usize, LabelError> {
        STANDARD_LABELS
            .iter()
            .position(|s| *s == name)
            .ok_or_else(|| LabelError::Unknown(name.to_string()))
    }

    /// Number of labels in the chain.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    /// True when the chain holds no labels (never constructible).
    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Label names in chain order.
    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Chain position of `label`, if part of this chain.
    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.names.iter().position(|n| n == label)
    }

    /// Range spec string (`"T1:T12"`) when contiguous, else a comma list.
    pub fn to_spec(&self) -> String {
        let first = Self::canonical_index(&self.names[0]).expect("chain labels are canonical");
        let contiguous = self
            .names
            .iter()
            .enumerate()
            .all(|(k, n)| STANDARD_LABELS[first + k] == n);
        if contiguous && self.names.len() > 1 {
            format!("{}:{}", self.names[0], self.names[self.names.len() - 1])
        } else {
            self.names.join(",")
        }
    }
}
