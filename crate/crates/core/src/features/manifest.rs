//! JSON dataset manifests: the query and segment registries plus labeled or
//! teacher-scored query/segment pairs.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::normalize::Normalizer;
use super::qbef::load_features_with_dim;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

impl Split {
    fn is_train(&self) -> bool {
        *self == Split::Train
    }
}

/// A registry entry mapping an id to a QBEF file, relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRef {
    pub id: String,
    pub path: String,
    /// Source keyword for synthetic queries; used for stratification only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keyword: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySegmentPair {
    pub query_id: String,
    pub segment_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_score: Option<f64>,
    /// Inclusive frame range of the term occurrence inside the segment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Split::is_train")]
    pub split: Split,
}

impl QuerySegmentPair {
    pub fn pair_id(&self) -> String {
        format!("{}|{}", self.query_id, self.segment_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub feature_dim: usize,
    pub queries: Vec<FeatureRef>,
    pub segments: Vec<FeatureRef>,
    pub pairs: Vec<QuerySegmentPair>,
    /// Per-dimension statistics computed over the training split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalizer>,
    /// Echo of the command that produced this file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<serde_json::Value>,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Self = serde_json::from_str(&text)?;
        manifest.validate_structure()?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Checks id uniqueness, referential integrity and per-pair invariants
    /// that do not need the feature files.
    pub fn validate_structure(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::Validation("feature_dim must be positive".into()));
        }
        let queries = unique_ids(&self.queries, "query")?;
        let segments = unique_ids(&self.segments, "segment")?;
        let mut seen = HashSet::new();
        for p in &self.pairs {
            if !queries.contains(p.query_id.as_str()) {
                return Err(Error::Validation(format!("pair references unknown query {}", p.query_id)));
            }
            if !segments.contains(p.segment_id.as_str()) {
                return Err(Error::Validation(format!(
                    "pair references unknown segment {}",
                    p.segment_id
                )));
            }
            if !seen.insert((p.query_id.as_str(), p.segment_id.as_str())) {
                return Err(Error::Validation(format!("duplicate pair {}", p.pair_id())));
            }
            if let Some(s) = p.teacher_score {
                if !(0.0..=1.0).contains(&s) {
                    return Err(Error::Validation(format!(
                        "pair {}: teacher score {s} outside [0, 1]",
                        p.pair_id()
                    )));
                }
            }
            if let Some((start, end)) = p.span {
                if start > end {
                    return Err(Error::Validation(format!("pair {}: span start > end", p.pair_id())));
                }
                if p.label != Some(true) {
                    return Err(Error::Validation(format!(
                        "pair {}: span given on a pair not labeled true",
                        p.pair_id()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Loads every referenced feature file, checking dims and span bounds.
    pub fn validate_files(&self, base_dir: &Path) -> Result<()> {
        let mut lengths = HashMap::new();
        for r in &self.segments {
            let seq = load_features_with_dim(base_dir.join(&r.path), self.feature_dim)?;
            lengths.insert(r.id.as_str(), seq.len());
        }
        for r in &self.queries {
            load_features_with_dim(base_dir.join(&r.path), self.feature_dim)?;
        }
        for p in &self.pairs {
            if let Some((_, end)) = p.span {
                let len = lengths[p.segment_id.as_str()];
                if end >= len {
                    return Err(Error::Validation(format!(
                        "pair {}: span end {end} beyond segment length {len}",
                        p.pair_id()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn query_path(&self, base_dir: &Path, id: &str) -> Option<PathBuf> {
        self.queries.iter().find(|r| r.id == id).map(|r| base_dir.join(&r.path))
    }

    pub fn pairs_in(&self, split: Split) -> impl Iterator<Item = &QuerySegmentPair> {
        self.pairs.iter().filter(move |p| p.split == split)
    }
}

fn unique_ids<'a>(refs: &'a [FeatureRef], what: &str) -> Result<HashSet<&'a str>> {
    let mut ids = HashSet::with_capacity(refs.len());
    for r in refs {
        if !ids.insert(r.id.as_str()) {
            return Err(Error::Validation(format!("duplicate {what} id {}", r.id)));
        }
    }
    Ok(ids)
}
