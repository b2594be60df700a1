//! Per-dimension global mean/variance normalization.

use serde::{Deserialize, Serialize};

use super::FeatureSequence;
use crate::error::{Error, Result};

const MIN_STD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Statistics pooled over every frame of `seqs`.
    pub fn fit<'a>(seqs: impl IntoIterator<Item = &'a FeatureSequence>) -> Result<Self> {
        let mut dim = None;
        let mut count = 0usize;
        let mut sum = Vec::new();
        let mut sum_sq = Vec::new();
        for seq in seqs {
            let d = *dim.get_or_insert_with(|| {
                sum = vec![0.0; seq.dim()];
                sum_sq = vec![0.0; seq.dim()];
                seq.dim()
            });
            if seq.dim() != d {
                return Err(Error::Validation(format!(
                    "{}: dim {} differs from {d}",
                    seq.id(),
                    seq.dim()
                )));
            }
            for row in seq.rows() {
                for ((s, q), &v) in sum.iter_mut().zip(&mut sum_sq).zip(row) {
                    let v = f64::from(v);
                    *s += v;
                    *q += v * v;
                }
            }
            count += seq.len();
        }
        if count == 0 {
            return Err(Error::InsufficientData("no frames to fit normalization".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sum_sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(MIN_STD))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, seq: &FeatureSequence) -> Result<FeatureSequence> {
        if seq.dim() != self.dim() {
            return Err(Error::Validation(format!(
                "{}: dim {} does not match normalizer dim {}",
                seq.id(),
                seq.dim(),
                self.dim()
            )));
        }
        let mut out = seq.clone();
        let d = self.dim();
        for (i, v) in out.as_mut_slice().iter_mut().enumerate() {
            let k = i % d;
            *v = ((f64::from(*v) - self.mean[k]) / self.std[k]) as f32;
        }
        Ok(out)
    }
}
