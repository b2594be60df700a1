//! Acoustic feature sequences, their on-disk formats, MFCC extraction and the
//! synthetic dataset generator.

pub mod manifest;
pub mod mfcc;
pub mod normalize;
pub mod qbef;
pub mod synth;
pub mod wav;

use crate::error::{Error, Result};

pub use manifest::{DatasetManifest, QuerySegmentPair, Split};
pub use normalize::Normalizer;
pub use qbef::{load_features, write_features};

/// A `T x d` matrix of per-frame features, stored row-major as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    id: String,
    frames: Vec<f32>,
    dim: usize,
    frame_period: f64,
}

impl FeatureSequence {
    pub fn new(
        id: impl Into<String>,
        frames: Vec<f32>,
        dim: usize,
        frame_period: f64,
    ) -> Result<Self> {
        let seq = Self {
            id: id.into(),
            frames,
            dim,
            frame_period,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn from_rows<R: AsRef<[f32]>>(
        id: impl Into<String>,
        rows: &[R],
        frame_period: f64,
    ) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        let mut frames = Vec::with_capacity(rows.len() * dim);
        for (t, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(Error::Validation(format!(
                    "row {t} has {} values, expected {dim}",
                    row.len()
                )));
            }
            frames.extend_from_slice(row);
        }
        Self::new(id, frames, dim, frame_period)
    }

    /// Checks the shape, finiteness and frame-period invariants.
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Validation(format!("{}: feature dim is 0", self.id)));
        }
        if self.frames.is_empty() {
            return Err(Error::Validation(format!("{}: sequence has no frames", self.id)));
        }
        if self.frames.len() % self.dim != 0 {
            return Err(Error::Validation(format!(
                "{}: {} values is not a multiple of dim {}",
                self.id,
                self.frames.len(),
                self.dim
            )));
        }
        if !(self.frame_period.is_finite() && self.frame_period > 0.0) {
            return Err(Error::Validation(format!(
                "{}: frame period {} must be positive",
                self.id, self.frame_period
            )));
        }
        if let Some(i) = self.frames.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "{}: non-finite value at frame {}, dim {}",
                self.id,
                i / self.dim,
                i % self.dim
            )));
        }
        Ok(())
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn set_id(&mut self, id: impl Into<String>) {
        self.id = id.into();
    }

    /// Number of frames `T`.
    pub fn len(&self) -> usize {
        self.frames.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame_period(&self) -> f64 {
        self.frame_period
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.frames[t * self.dim..(t + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.frames.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.frames
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.frames
    }

    /// Frames `start..end` as a new sequence.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::Validation(format!(
                "{}: invalid frame range {start}..{end} of {}",
                self.id,
                self.len()
            )));
        }
        Self::new(
            self.id.clone(),
            self.frames[start * self.dim..end * self.dim].to_vec(),
            self.dim,
            self.frame_period,
        )
    }

    /// Frames converted to `f64`, row-major.
    pub fn as_f64(&self) -> Vec<f64> {
        self.frames.iter().map(|&v| f64::from(v)).collect()
    }
}
