//! Per-vertebra heatmap stacks.
//!
//! A stack holds one scalar channel per label, all on the same grid. Channel
//! order equals chain order.

use thiserror::Error;

use crate::landmarks::LandmarkSet;
use crate::par;
use crate::volume::{make_gaussian_heatmap, Geometry, Volume3D, VolumeError};

/// Errors from stack construction.
#[derive(Debug, Error)]
pub enum StackError {
    #[error("stack needs at least one channel")]
    Empty,
    #[error("{channels} channels but {labels} labels")]
    LabelCountMismatch { channels: usize, labels: usize },
    #[error("channel {0} has a different grid than channel 0")]
    GeometryMismatch(usize),
    #[error("duplicate label {0:?}")]
    DuplicateLabel(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// One heatmap channel per label on a shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    labels: Vec<String>,
    channels: Vec<Volume3D>,
}

impl HeatmapStack {
    pub fn new(labels: Vec<String>, channels: Vec<Volume3D>) -> Result<HeatmapStack, StackError> {
        if channels.is_empty() {
            return Err(StackError::Empty);
        }
        if channels.len() != labels.len() {
            return Err(StackError::LabelCountMismatch {
                channels: channels.len(),
                labels: labels.len(),
            });
        }
        for (i, c) in channels.iter().enumerate().skip(1) {
            if c.geometry() != channels[0].geometry() {
                return Err(StackError::GeometryMismatch(i));
            }
        }
        for (i, l) in labels.iter().enumerate() {
            if labels[..i].contains(l) {
                return Err(StackError::DuplicateLabel(l.clone()));
            }
        }
        Ok(HeatmapStack { labels, channels })
    }

    /// Renders the Gaussian regression target for a landmark set: one channel
    /// per landmark, absent landmarks give all-zero channels.
    pub fn gaussian_targets(
        geometry: &Geometry,
        landmarks: &LandmarkSet,
        sigma_mm: f64,
    ) -> Result<HeatmapStack, StackError> {
        let entries: Vec<_> = landmarks.iter().cloned().collect();
        let channels = par::map_slice(&entries, |lm| {
            if lm.present {
                make_gaussian_heatmap(geometry, lm.position_mm, sigma_mm)
            } else {
                Ok(Volume3D::zeros(*geometry))
            }
        });
        let channels = channels.into_iter().collect::<Result<Vec<_>, _>>()?;
        HeatmapStack::new(entries.into_iter().map(|lm| lm.label).collect(), channels)
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn geometry(&self) -> &Geometry {
        self.channels[0].geometry()
    }

    pub fn channel(&self, i: usize) -> &Volume3D {
        &self.channels[i]
    }

    pub fn channel_mut(&mut self, i: usize) -> &mut Volume3D {
        &mut self.channels[i]
    }

    pub fn channels(&self) -> &[Volume3D] {
        &self.channels
    }

    /// Scales every channel to unit sum. Channels whose sum is zero are left
    /// untouched and reported by index.
    pub fn normalize(&mut self) -> Vec<usize> {
        let mut zero = Vec::new();
        for (i, c) in self.channels.iter_mut().enumerate() {
            let s = c.sum();
            if s > 0.0 {
                for v in c.data_mut() {
                    *v /= s;
                }
            } else {
                zero.push(i);
            }
        }
        zero
    }
}
