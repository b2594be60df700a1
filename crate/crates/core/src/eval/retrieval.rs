//! Scoring listed query/segment pairs with the network or with DTW.

use std::collections::HashMap;

use rayon::prelude::*;

use super::localize::LocalizationRecord;
use super::ranking::{mean_average_precision, rankings_from_scores, MapReport};
use crate::dataset::Dataset;
use crate::dtw::{dtw_score, DtwConfig, MinMax};
use crate::error::{Error, Result};
use crate::features::manifest::{QuerySegmentPair, Split};
use crate::model::{encode_query, score_encoded, AttentionTrace, EncodingCache, ModelParams};
use crate::tensor::Real;

/// Network confidences and attention traces for `pairs`, in order. Query
/// vectors are computed once per query and segment encodings go through
/// `cache`.
pub fn score_pairs_traced<T: Real>(
    params: &ModelParams<T>,
    dataset: &Dataset,
    pairs: &[&QuerySegmentPair],
    cache: &EncodingCache<T>,
) -> Result<Vec<(f64, AttentionTrace<T>)>> {
    let mut query_ids: Vec<&str> = pairs.iter().map(|p| p.query_id.as_str()).collect();
    query_ids.sort_unstable();
    query_ids.dedup();
    let vectors: HashMap<&str, Vec<T>> = query_ids
        .par_iter()
        .map(|&id| Ok((id, encode_query(params, dataset.sequence(id)?)?)))
        .collect::<Result<_>>()?;
    let version = params.version_hash();
    pairs
        .par_iter()
        .map(|p| {
            let enc = cache.get_or_encode_versioned(params, version, dataset.sequence(&p.segment_id)?)?;
            let (conf, trace) = score_encoded(params, &vectors[p.query_id.as_str()], &enc)?;
            Ok((conf.score, trace))
        })
        .collect()
}

pub fn score_pairs_model<T: Real>(
    params: &ModelParams<T>,
    dataset: &Dataset,
    pairs: &[&QuerySegmentPair],
    cache: &EncodingCache<T>,
) -> Result<Vec<f64>> {
    Ok(score_pairs_traced(params, dataset, pairs, cache)?.into_iter().map(|(s, _)| s).collect())
}

/// DTW similarities for `pairs`, in order.
pub fn score_pairs_dtw(dataset: &Dataset, pairs: &[&QuerySegmentPair], cfg: &DtwConfig) -> Result<Vec<f64>> {
    pairs
        .par_iter()
        .map(|p| Ok(dtw_score(dataset.sequence(&p.query_id)?, dataset.sequence(&p.segment_id)?, cfg)?.similarity))
        .collect()
}

/// Per-query MAP over the listed pairs, relevance taken from the labels.
pub fn pairs_map(pairs: &[&QuerySegmentPair], scores: &[f64]) -> Result<MapReport> {
    if pairs.len() != scores.len() {
        return Err(Error::Validation(format!("{} pairs but {} scores", pairs.len(), scores.len())));
    }
    let rows = pairs
        .iter()
        .zip(scores)
        .map(|(p, &s)| (p.query_id.clone(), p.segment_id.clone(), s, p.label));
    mean_average_precision(&rankings_from_scores(rows)?)
}

/// DTW teacher annotation of every listed pair.
#[derive(Debug, Clone)]
pub struct TeacherScores {
    /// Raw similarities in manifest pair order.
    pub raw: Vec<f64>,
    /// Min-max map fitted on the training split.
    pub fit: MinMax,
}

impl TeacherScores {
    pub fn normalized(&self) -> Vec<f64> {
        self.raw.iter().map(|&v| self.fit.apply(v)).collect()
    }
}

/// Scores every manifest pair by DTW and writes the normalized similarity
/// into its `teacher_score`.
pub fn annotate_teacher_scores(dataset: &mut Dataset, cfg: &DtwConfig) -> Result<TeacherScores> {
    let pairs: Vec<&QuerySegmentPair> = dataset.manifest.pairs.iter().collect();
    let raw = score_pairs_dtw(dataset, &pairs, cfg)?;
    let train: Vec<f64> = pairs
        .iter()
        .zip(&raw)
        .filter(|(p, _)| p.split == Split::Train)
        .map(|(_, &v)| v)
        .collect();
    if train.is_empty() {
        return Err(Error::InsufficientData("teacher normalization needs training pairs".into()));
    }
    let fit = MinMax::fit(&train)?;
    for (p, &v) in dataset.manifest.pairs.iter_mut().zip(&raw) {
        p.teacher_score = Some(fit.apply(v));
    }
    Ok(TeacherScores { raw, fit })
}

/// Final-hop argmax records for the positives among `pairs` that carry a
/// span.
pub fn attention_records<T: Real>(
    params: &ModelParams<T>,
    dataset: &Dataset,
    pairs: &[&QuerySegmentPair],
    cache: &EncodingCache<T>,
) -> Result<Vec<LocalizationRecord>> {
    let located: Vec<&QuerySegmentPair> = pairs
        .iter()
        .copied()
        .filter(|p| p.label == Some(true) && p.span.is_some())
        .collect();
    let traced = score_pairs_traced(params, dataset, &located, cache)?;
    located
        .iter()
        .zip(traced)
        .map(|(p, (_, trace))| {
            let seg = dataset.sequence(&p.segment_id)?;
            Ok(LocalizationRecord::new(
                p.pair_id(),
                trace.argmax_frame(),
                p.span.expect("filtered on span"),
                seg.len(),
                seg.frame_period(),
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::synth::{generate_synthetic_dataset, SynthConfig};
    use crate::model::{Detector, ModelConfig};

    fn dataset() -> Dataset {
        let cfg = SynthConfig {
            keywords: 3,
            pairs_per_keyword: 6,
            test_pairs_per_keyword: 4,
            queries_per_keyword: 2,
            test_queries_per_keyword: 2,
            seed: 3,
            ..SynthConfig::default()
        };
        Dataset::from_synthetic(&generate_synthetic_dataset(&cfg).unwrap()).unwrap()
    }

    fn params() -> ModelParams<f64> {
        let cfg = ModelConfig {
            feature_dim: 12,
            hidden_dim: 4,
            lstm_layers: 1,
            hops: 2,
            detector: Detector::Nn,
            detector_widths: vec![5, 2],
            detector_query: Default::default(),
            pooling: Default::default(),
        };
        ModelParams::init(&cfg, 1).unwrap()
    }

    #[test]
    fn cached_scores_match_direct_scoring() {
        let ds = dataset();
        let p = params();
        let pairs = ds.pairs(Split::Test);
        let cache = EncodingCache::new();
        let batched = score_pairs_model(&p, &ds, &pairs, &cache).unwrap();
        assert!(!cache.is_empty());
        for (pair, s) in pairs.iter().zip(&batched) {
            let q = ds.sequence(&pair.query_id).unwrap();
            let seg = ds.sequence(&pair.segment_id).unwrap();
            let (conf, _) = crate::model::score_pair(&p, q, crate::model::SegmentInput::Raw(seg)).unwrap();
            assert_eq!(conf.score, *s);
        }
    }

    #[test]
    fn teacher_scores_span_unit_interval_on_training_split() {
        let mut ds = dataset();
        let t = annotate_teacher_scores(&mut ds, &DtwConfig::default()).unwrap();
        let train: Vec<f64> = ds.pairs(Split::Train).iter().map(|p| p.teacher_score.unwrap()).collect();
        assert_eq!(train.iter().copied().fold(f64::INFINITY, f64::min), 0.0);
        assert_eq!(train.iter().copied().fold(f64::NEG_INFINITY, f64::max), 1.0);
        assert!(ds.manifest.pairs.iter().all(|p| (0.0..=1.0).contains(&p.teacher_score.unwrap())));
        let norm = t.normalized();
        for i in 0..t.raw.len() {
            for j in 0..t.raw.len() {
                if t.raw[i] < t.raw[j] {
                    assert!(norm[i] <= norm[j]);
                }
            }
        }
    }

    #[test]
    fn localization_records_cover_located_positives() {
        let ds = dataset();
        let pairs = ds.pairs(Split::Test);
        let recs = attention_records(&params(), &ds, &pairs, &EncodingCache::new()).unwrap();
        let expected = pairs.iter().filter(|p| p.label == Some(true) && p.span.is_some()).count();
        assert_eq!(recs.len(), expected);
        assert!(recs.iter().all(|r| r.argmax_frame < r.segment_frames));
    }

    #[test]
    fn pairs_map_rejects_length_mismatch() {
        let ds = dataset();
        let pairs = ds.pairs(Split::Test);
        assert!(pairs_map(&pairs, &[0.5]).is_err());
    }
}
