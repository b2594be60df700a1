//! The attention-based multi-hop detector.
//!
//! A shared LSTM stack encodes the query into one vector (its last top-layer
//! state) and the segment into one vector per frame. Each hop attends over
//! the frame vectors with cosine scores normalized by softmax, pools them,
//! and adds the pooled vector to the query vector for the next hop. A
//! detector head turns the query vector and the last pooled vector into a
//! confidence score.

pub mod attention;
pub mod cache;
pub mod scoring;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Normalizer;
use crate::tensor::checkpoint::{self, Checkpoint};
use crate::tensor::{Activation, FeedForward, LstmCellParams, Real, Tensor};

pub use attention::{attend, run_hops, AttentionTrace, HopTrace, SegmentEncoding};
pub use cache::EncodingCache;
pub use scoring::{
    detect, encode_query, encode_segment, forward_backward, pair_loss, score_encoded, score_pair, Confidence, SegmentInput,
    Target,
};

pub const MAX_HOPS: usize = 8;
pub const REFERENCE_HIDDEN: usize = 128;
pub const REFERENCE_DETECTOR: [usize; 4] = [128, 64, 32, 2];
pub const DESK_HIDDEN: usize = 16;
pub const DESK_DETECTOR: [usize; 4] = [32, 16, 8, 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Detector {
    /// Cosine similarity of the query and pooled vectors.
    Cos,
    /// Feed-forward network on the concatenated vectors.
    Nn,
    /// Feed-forward network on the concatenated vectors plus their cosine.
    NnCos,
}

impl Detector {
    pub fn as_str(&self) -> &'static str {
        match self {
            Detector::Cos => "cos",
            Detector::Nn => "nn",
            Detector::NnCos => "nn_cos",
        }
    }
}

/// Which query vector the detector sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorQuery {
    /// The query encoding before any hop.
    #[default]
    Original,
    /// The query vector used by the last hop.
    LastHop,
}

/// How frame encodings are reduced to the segment vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Attention,
    /// Ablation: the segment vector is the last frame's encoding.
    LastFrame,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub lstm_layers: usize,
    pub hops: usize,
    pub detector: Detector,
    pub detector_widths: Vec<usize>,
    #[serde(default)]
    pub detector_query: DetectorQuery,
    #[serde(default)]
    pub pooling: Pooling,
}

impl ModelConfig {
    /// The reference architecture: 2 x 128 LSTM, 128/64/32/2 detector.
    pub fn reference(feature_dim: usize, hops: usize, detector: Detector) -> Self {
        Self {
            feature_dim,
            hidden_dim: REFERENCE_HIDDEN,
            lstm_layers: 2,
            hops,
            detector,
            detector_widths: REFERENCE_DETECTOR.to_vec(),
            detector_query: DetectorQuery::Original,
            pooling: Pooling::Attention,
        }
    }

    /// A 2 x 16 LSTM with a 32/16/8/2 detector, small enough to train on one
    /// CPU core in minutes.
    pub fn desk(feature_dim: usize, hops: usize, detector: Detector) -> Self {
        Self {
            hidden_dim: DESK_HIDDEN,
            detector_widths: DESK_DETECTOR.to_vec(),
            ..Self::reference(feature_dim, hops, detector)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_HOPS).contains(&self.hops) {
            return Err(Error::Config(format!("hops must be in 1..={MAX_HOPS}, got {}", self.hops)));
        }
        if self.feature_dim == 0 || self.hidden_dim == 0 || self.lstm_layers == 0 {
            return Err(Error::Config("feature_dim, hidden_dim and lstm_layers must be positive".into()));
        }
        if self.detector != Detector::Cos && self.detector_widths.last() != Some(&2) {
            return Err(Error::Config("detector network must end in 2 logits".into()));
        }
        if self.detector_widths.contains(&0) {
            return Err(Error::Config("detector widths must be positive".into()));
        }
        Ok(())
    }

    /// Input width of the detector network.
    pub fn detector_input_dim(&self) -> usize {
        match self.detector {
            Detector::Cos => 0,
            Detector::Nn => 2 * self.hidden_dim,
            Detector::NnCos => 2 * self.hidden_dim + 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f64> {
    pub config: ModelConfig,
    pub lstm: Vec<LstmCellParams<T>>,
    pub detector: Option<FeedForward<T>>,
}

impl<T: Real> ModelParams<T> {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_dim;
        let lstm = (0..config.lstm_layers)
            .map(|l| LstmCellParams::zeros(if l == 0 { config.feature_dim } else { h }, h))
            .collect();
        let detector = (config.detector != Detector::Cos).then(|| {
            FeedForward::zeros(
                config.detector_input_dim(),
                &config.detector_widths,
                Activation::Relu,
                Activation::Identity,
            )
        });
        Ok(Self {
            config: config.clone(),
            lstm,
            detector,
        })
    }

    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden_dim;
        let lstm = (0..config.lstm_layers)
            .map(|l| LstmCellParams::init(if l == 0 { config.feature_dim } else { h }, h, &mut rng))
            .collect();
        let detector = (config.detector != Detector::Cos).then(|| {
            FeedForward::init(
                config.detector_input_dim(),
                &config.detector_widths,
                Activation::Relu,
                Activation::Identity,
                &mut rng,
            )
        });
        Ok(Self {
            config: config.clone(),
            lstm,
            detector,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config).expect("config already validated")
    }

    /// Parameter tensors with their checkpoint names, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (l, p) in self.lstm.iter().enumerate() {
            out.push((format!("lstm.{l}.w"), &p.w));
            out.push((format!("lstm.{l}.u"), &p.u));
            out.push((format!("lstm.{l}.b"), &p.b));
        }
        if let Some(ff) = &self.detector {
            for (k, layer) in ff.layers.iter().enumerate() {
                out.push((format!("detector.{k}.w"), &layer.w));
                out.push((format!("detector.{k}.b"), &layer.b));
            }
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for p in &mut self.lstm {
            out.push(&mut p.w);
            out.push(&mut p.u);
            out.push(&mut p.b);
        }
        if let Some(ff) = &mut self.detector {
            for layer in &mut ff.layers {
                out.push(&mut layer.w);
                out.push(&mut layer.b);
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            lstm: self.lstm.iter().map(|p| p.cast()).collect(),
            detector: self.detector.as_ref().map(|d| d.cast()),
        }
    }

    /// FNV-1a over the configuration and every parameter bit pattern.
    pub fn version_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        feed(serde_json::to_string(&self.config).unwrap_or_default().as_bytes());
        for t in self.tensors() {
            for v in t.data() {
                feed(&v.as_f64().to_bits().to_le_bytes());
            }
        }
        h
    }
}

impl ModelParams<f64> {
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn unflatten(&mut self, flat: &[f64]) {
        let mut k = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[k..k + n]);
            k += n;
        }
    }

    /// `self += other`, tensor by tensor.
    pub fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }
}

/// JSON header stored at the front of a QBEM checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalizer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<serde_json::Value>,
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &ModelParams<f64>,
    normalization: Option<&Normalizer>,
    run_config: Option<&serde_json::Value>,
) -> Result<()> {
    let header = CheckpointHeader {
        model: params.config.clone(),
        normalization: normalization.cloned(),
        run_config: run_config.cloned(),
    };
    checkpoint::save(path, &serde_json::to_value(&header)?, &params.named_tensors())
}

pub fn params_from_checkpoint(ck: &Checkpoint) -> Result<(ModelParams<f64>, CheckpointHeader)> {
    let header: CheckpointHeader = serde_json::from_value(ck.header.clone())?;
    let mut params = ModelParams::zeros(&header.model)?;
    let expected: Vec<(String, Vec<usize>)> = params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if expected.len() != ck.tensors.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, model needs {}",
            ck.tensors.len(),
            expected.len()
        )));
    }
    for (((name, shape), target), (got_name, got)) in expected.iter().zip(params.tensors_mut()).zip(&ck.tensors) {
        if name != got_name || shape.as_slice() != got.shape() {
            return Err(Error::Format(format!(
                "checkpoint section {got_name} {:?} does not match {name} {shape:?}",
                got.shape()
            )));
        }
        *target = got.clone();
    }
    Ok((params, header))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParams<f64>, CheckpointHeader)> {
    params_from_checkpoint(&checkpoint::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(detector: Detector) -> ModelConfig {
        ModelConfig {
            feature_dim: 3,
            hidden_dim: 4,
            lstm_layers: 2,
            hops: 2,
            detector,
            detector_widths: vec![6, 2],
            detector_query: DetectorQuery::Original,
            pooling: Pooling::Attention,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = small(Detector::Nn);
        c.hops = 0;
        assert!(c.validate().is_err());
        c.hops = 9;
        assert!(c.validate().is_err());
        c.hops = 8;
        c.validate().unwrap();
        assert_eq!(ModelConfig::reference(39, 1, Detector::NnCos).detector_input_dim(), 257);
        assert_eq!(ModelConfig::reference(39, 1, Detector::Nn).detector_input_dim(), 256);
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let p = ModelParams::<f64>::init(&small(Detector::Cos), 1).unwrap();
        assert!(p.detector.is_none());
        let b = p.lstm[0].b.data();
        assert!(b[4..8].iter().all(|&v| v == 1.0));
        assert!(b[..4].iter().chain(&b[8..]).all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.qbem");
        let p = ModelParams::<f64>::init(&small(Detector::NnCos), 3).unwrap();
        let run = serde_json::json!({"command": "train"});
        let norm = Normalizer {
            mean: vec![
                0.06403174259014728, -0.10273747723614934, 0.0022721354019984573, -0.061903352742124544,
                0.1863377445514873, -0.027665737399484278, 0.08005587993388769, -0.05979059953280055,
                0.1466493769381424, -0.017403948515341838, 0.18240940946307574, -0.07861533352872176,
            ],
            std: vec![
                0.8917367315915452, 0.879156628514578, 0.9030358701989762, 0.9538858736707932,
                0.9883344525924311, 0.8311783135195053, 0.8539195190846874, 0.8456216193782721,
                0.9791976985510167, 0.8789193829749066, 0.9917452506263016, 1.0387364434340602,
            ],
        };
        save_checkpoint(&path, &p, Some(&norm), Some(&run)).unwrap();
        let (back, header) = load_checkpoint(&path).unwrap();
        assert_eq!(header.model, p.config);
        assert_eq!(header.normalization.as_ref(), Some(&norm));
        assert_eq!(header.run_config, Some(run));
        for (a, b) in back.flatten().iter().zip(p.flatten()) {
            assert_eq!(*a, f64::from(b as f32));
        }
        let raw = checkpoint::load(&path).unwrap();
        assert_eq!(raw.header["hops"], 2);
        assert_eq!(raw.header["detector"], "nn_cos");
        let sections: Vec<(String, &crate::tensor::Tensor)> = raw.tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
        assert_eq!(checkpoint::encode(&raw.header, &sections).unwrap(), std::fs::read(&path).unwrap());
        // A second save of the loaded parameters is byte-identical.
        let path2 = dir.path().join("m2.qbem");
        save_checkpoint(&path2, &back, header.normalization.as_ref(), header.run_config.as_ref()).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn hash_tracks_parameter_changes() {
        let mut p = ModelParams::<f64>::init(&small(Detector::Nn), 3).unwrap();
        let h = p.version_hash();
        assert_eq!(h, p.clone().version_hash());
        p.lstm[1].u.data_mut()[0] += 1e-12;
        assert_ne!(h, p.version_hash());
    }
}
