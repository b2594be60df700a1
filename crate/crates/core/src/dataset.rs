//! A manifest together with its loaded, normalized feature sequences.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::features::qbef::load_features_with_dim;
use crate::features::synth::SyntheticDataset;
use crate::features::{DatasetManifest, FeatureSequence, QuerySegmentPair, Split};

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    sequences: HashMap<String, FeatureSequence>,
}

impl Dataset {
    /// Reads `manifest.json` and every referenced feature file. Features are
    /// normalized with the manifest's statistics when present.
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let manifest = DatasetManifest::load(manifest_path)?;
        let base = base_dir(manifest_path);
        let mut sequences = HashMap::new();
        for r in manifest.queries.iter().chain(&manifest.segments) {
            let mut seq = load_features_with_dim(base.join(&r.path), manifest.feature_dim)?;
            seq.set_id(r.id.clone());
            sequences.insert(r.id.clone(), seq);
        }
        Self::from_parts(manifest, sequences)
    }

    pub fn from_synthetic(data: &SyntheticDataset) -> Result<Self> {
        let sequences = data.sequences.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        Self::from_parts(data.manifest.clone(), sequences)
    }

    /// Validates spans against loaded lengths and applies normalization.
    pub fn from_parts(manifest: DatasetManifest, mut sequences: HashMap<String, FeatureSequence>) -> Result<Self> {
        manifest.validate_structure()?;
        for r in manifest.queries.iter().chain(&manifest.segments) {
            let seq = sequences
                .get(&r.id)
                .ok_or_else(|| Error::Validation(format!("no features loaded for {}", r.id)))?;
            if seq.dim() != manifest.feature_dim {
                return Err(Error::Validation(format!(
                    "{}: feature dim {} does not match manifest dim {}",
                    r.id,
                    seq.dim(),
                    manifest.feature_dim
                )));
            }
        }
        for p in &manifest.pairs {
            if let Some((_, end)) = p.span {
                let len = sequences[&p.segment_id].len();
                if end >= len {
                    return Err(Error::Validation(format!(
                        "pair {}: span end {end} beyond segment length {len}",
                        p.pair_id()
                    )));
                }
            }
        }
        if let Some(norm) = &manifest.normalization {
            for seq in sequences.values_mut() {
                *seq = norm.apply(seq)?;
            }
        }
        Ok(Self { manifest, sequences })
    }

    pub fn sequence(&self, id: &str) -> Result<&FeatureSequence> {
        self.sequences
            .get(id)
            .ok_or_else(|| Error::Validation(format!("unknown sequence id {id}")))
    }

    pub fn pairs(&self, split: Split) -> Vec<&QuerySegmentPair> {
        self.manifest.pairs_in(split).collect()
    }

    /// Every query of `split` against every segment of `split`. A pair is
    /// relevant when the segment carries the query's keyword; without a
    /// query keyword the manifest label is used when the pair is listed.
    pub fn search_grid(&self, split: Split) -> Vec<SearchItem> {
        let pairs = self.pairs(split);
        let mut queries: Vec<&str> = pairs.iter().map(|p| p.query_id.as_str()).collect();
        let mut segments: Vec<&str> = pairs.iter().map(|p| p.segment_id.as_str()).collect();
        queries.sort_unstable();
        queries.dedup();
        segments.sort_unstable();
        segments.dedup();
        let keyword = |refs: &[crate::features::manifest::FeatureRef]| -> HashMap<String, Option<String>> {
            refs.iter().map(|r| (r.id.clone(), r.keyword.clone())).collect()
        };
        let qk = keyword(&self.manifest.queries);
        let sk = keyword(&self.manifest.segments);
        let labels: HashMap<(&str, &str), Option<bool>> = pairs
            .iter()
            .map(|p| ((p.query_id.as_str(), p.segment_id.as_str()), p.label))
            .collect();
        let mut out = Vec::with_capacity(queries.len() * segments.len());
        for q in &queries {
            for s in &segments {
                let relevant = match &qk[*q] {
                    Some(k) => Some(sk[*s].as_deref() == Some(k.as_str())),
                    None => labels.get(&(*q, *s)).copied().flatten(),
                };
                out.push(SearchItem {
                    query_id: q.to_string(),
                    segment_id: s.to_string(),
                    relevant,
                });
            }
        }
        out
    }

    pub fn frame_period(&self) -> f64 {
        self.sequences.values().next().map_or(0.0, |s| s.frame_period())
    }

    pub fn feature_dim(&self) -> usize {
        self.manifest.feature_dim
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchItem {
    pub query_id: String,
    pub segment_id: String,
    pub relevant: Option<bool>,
}

/// Directory that relative feature paths in a manifest resolve against.
pub fn base_dir(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}
