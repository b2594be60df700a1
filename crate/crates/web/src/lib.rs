//! Browser bindings for a small interactive demo: DTW alignment of a
//! synthetic query, cosine attention across hops, and an MFCC view of a
//! synthesized tone sweep. Every export returns a JSON string.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use qbestd::dataset::Dataset;
use qbestd::dtw::{dtw_score, DtwConfig};
use qbestd::features::mfcc::extract_mfcc;
use qbestd::features::synth::{generate_synthetic_dataset, SynthConfig};
use qbestd::features::FeatureSequence;
use qbestd::model::{run_hops, SegmentEncoding};
use qbestd::Result;

/// Frames stacked on each side when building attention keys from raw features.
pub const CONTEXT: usize = 2;

/// One positive query/segment pair drawn from a tiny synthetic dataset.
pub struct DemoPair {
    pub query: FeatureSequence,
    pub segment: FeatureSequence,
    pub span: (usize, usize),
}

impl DemoPair {
    pub fn generate(seed: u64, noise: f64, nuisance_dims: usize) -> Result<Self> {
        let cfg = SynthConfig {
            keywords: 2,
            pairs_per_keyword: 2,
            test_pairs_per_keyword: 1,
            queries_per_keyword: 1,
            test_queries_per_keyword: 1,
            positive_fraction: 1.0,
            nuisance_dims,
            noise,
            seed,
            ..SynthConfig::default()
        };
        let ds = Dataset::from_synthetic(&generate_synthetic_dataset(&cfg)?)?;
        let pair = ds
            .manifest
            .pairs
            .iter()
            .find(|p| p.label == Some(true) && p.span.is_some())
            .ok_or_else(|| qbestd::Error::InsufficientData("no positive pair generated".into()))?;
        Ok(Self {
            query: ds.sequence(&pair.query_id)?.clone(),
            segment: ds.sequence(&pair.segment_id)?.clone(),
            span: pair.span.expect("filtered on span"),
        })
    }
}

fn rows(seq: &FeatureSequence) -> Vec<Vec<f32>> {
    seq.rows().map(<[f32]>::to_vec).collect()
}

#[derive(Serialize)]
pub struct DtwView {
    pub query: Vec<Vec<f32>>,
    pub segment: Vec<Vec<f32>>,
    pub true_span: (usize, usize),
    pub best_span: (usize, usize),
    pub path: Vec<(usize, usize)>,
    pub similarity: f64,
}

pub fn dtw_view(seed: u64, noise: f64, nuisance_dims: usize) -> Result<DtwView> {
    let pair = DemoPair::generate(seed, noise, nuisance_dims)?;
    let r = dtw_score(&pair.query, &pair.segment, &DtwConfig::default())?;
    Ok(DtwView {
        query: rows(&pair.query),
        segment: rows(&pair.segment),
        true_span: pair.span,
        best_span: r.best_span,
        path: r.path,
        similarity: r.similarity,
    })
}

/// Each frame concatenated with its `CONTEXT` neighbours on both sides,
/// clamped at the edges.
pub fn stacked(seq: &FeatureSequence) -> Vec<f64> {
    let n = seq.len();
    let mut out = Vec::with_capacity(n * seq.dim() * (2 * CONTEXT + 1));
    for t in 0..n {
        for o in 0..=2 * CONTEXT {
            let u = (t + o).saturating_sub(CONTEXT).min(n - 1);
            out.extend(seq.row(u).iter().map(|&v| f64::from(v)));
        }
    }
    out
}

#[derive(Serialize)]
pub struct AttentionView {
    pub true_span: (usize, usize),
    /// Softmax weights per hop.
    pub weights: Vec<Vec<f64>>,
    pub argmax: Vec<usize>,
}

/// Attention with the query as the mean of its stacked frames and the
/// stacked segment frames as keys.
pub fn attention_view(seed: u64, noise: f64, nuisance_dims: usize, hops: usize) -> Result<AttentionView> {
    let pair = DemoPair::generate(seed, noise, nuisance_dims)?;
    let dim = pair.query.dim() * (2 * CONTEXT + 1);
    let q = stacked(&pair.query);
    let frames = pair.query.len() as f64;
    let query: Vec<f64> = (0..dim)
        .map(|k| q.chunks_exact(dim).map(|r| r[k]).sum::<f64>() / frames)
        .collect();
    let enc = SegmentEncoding::new("segment", stacked(&pair.segment), dim);
    let trace = run_hops(&query, &enc, hops)?;
    let argmax = trace
        .hops
        .iter()
        .map(|h| (0..h.weights.len()).fold(0, |b, t| if h.weights[t] > h.weights[b] { t } else { b }))
        .collect();
    Ok(AttentionView {
        true_span: pair.span,
        weights: trace.hops.into_iter().map(|h| h.weights).collect(),
        argmax,
    })
}

#[derive(Serialize)]
pub struct MfccView {
    pub frames: Vec<Vec<f32>>,
    pub frame_period: f64,
}

/// MFCCs of a linear sine sweep from `f0` to `f1` Hz sampled at 16 kHz.
pub fn mfcc_view(f0: f64, f1: f64, seconds: f64) -> Result<MfccView> {
    const RATE: u32 = 16_000;
    if !(seconds > 0.0 && seconds <= 10.0) {
        return Err(qbestd::Error::Config(format!("duration {seconds} s outside (0, 10]")));
    }
    let n = (seconds * f64::from(RATE)) as usize;
    let samples: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / f64::from(RATE);
            let phase = 2.0 * std::f64::consts::PI * (f0 * t + (f1 - f0) * t * t / (2.0 * seconds));
            0.5 * phase.sin()
        })
        .collect();
    let seq = extract_mfcc(&samples, RATE)?;
    Ok(MfccView {
        frame_period: seq.frame_period(),
        frames: rows(&seq),
    })
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsValue> {
    let v = r.map_err(|e| JsValue::from_str(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen]
pub fn dtw_alignment(seed: u32, noise: f64, nuisance_dims: u32) -> std::result::Result<String, JsValue> {
    to_js(dtw_view(u64::from(seed), noise, nuisance_dims as usize))
}

#[wasm_bindgen]
pub fn attention_hops(seed: u32, noise: f64, nuisance_dims: u32, hops: u32) -> std::result::Result<String, JsValue> {
    to_js(attention_view(u64::from(seed), noise, nuisance_dims as usize, hops as usize))
}

#[wasm_bindgen]
pub fn mfcc_sweep(f0: f64, f1: f64, seconds: f64) -> std::result::Result<String, JsValue> {
    to_js(mfcc_view(f0, f1, seconds))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dtw_view_path_stays_inside_segment() {
        let v = dtw_view(4, 0.1, 0).unwrap();
        assert_eq!(v.path.first().unwrap().0, 0);
        assert_eq!(v.path.last().unwrap().0, v.query.len() - 1);
        assert!(v.path.iter().all(|&(_, j)| j < v.segment.len()));
        assert!(v.similarity > 0.0 && v.similarity <= 1.0);
    }

    #[test]
    fn same_seed_same_view() {
        let a = serde_json::to_string(&dtw_view(9, 0.2, 3).unwrap()).unwrap();
        let b = serde_json::to_string(&dtw_view(9, 0.2, 3).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn attention_weights_are_distributions() {
        let v = attention_view(1, 0.2, 3, 3).unwrap();
        assert_eq!(v.weights.len(), 3);
        for w in &v.weights {
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(attention_view(1, 0.2, 3, 0).is_err());
    }

    #[test]
    fn stacking_clamps_at_edges() {
        let seq = FeatureSequence::from_rows("s", &[[1.0f32], [2.0], [3.0]], 0.01).unwrap();
        assert_eq!(stacked(&seq), vec![1.0, 1.0, 1.0, 2.0, 3.0, 1.0, 1.0, 2.0, 3.0, 3.0, 1.0, 2.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn mfcc_view_has_39_coefficients() {
        let v = mfcc_view(300.0, 3000.0, 0.5).unwrap();
        assert!(v.frames.len() > 40);
        assert!(v.frames.iter().all(|f| f.len() == 39));
        assert!(mfcc_view(300.0, 3000.0, 0.0).is_err());
    }
}
