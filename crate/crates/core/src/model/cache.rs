//! Segment encodings cached per parameter version.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use super::attention::SegmentEncoding;
use super::scoring::encode_segment;
use super::ModelParams;
use crate::error::Result;
use crate::features::FeatureSequence;
use crate::tensor::Real;

/// Concurrent cache keyed by `(segment_id, parameter version hash)`. Seeing
/// a new version drops every stored encoding.
#[derive(Debug)]
pub struct EncodingCache<T = f64> {
    inner: RwLock<Inner<T>>,
}

#[derive(Debug)]
struct Inner<T> {
    version: u64,
    entries: HashMap<String, Arc<SegmentEncoding<T>>>,
}

impl<T: Real> Default for EncodingCache<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> EncodingCache<T> {
    pub fn new() -> Self {
        Self {
            inner: RwLock::new(Inner {
                version: 0,
                entries: HashMap::new(),
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.read().expect("cache lock").entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.inner.write().expect("cache lock").entries.clear();
    }

    /// Returns the cached encoding of `segment` under `params`, computing it
    /// on a miss.
    pub fn get_or_encode(&self, params: &ModelParams<T>, segment: &FeatureSequence) -> Result<Arc<SegmentEncoding<T>>> {
        let version = params.version_hash();
        self.get_or_encode_versioned(params, version, segment)
    }

    /// Like [`Self::get_or_encode`] with a precomputed version hash.
    pub fn get_or_encode_versioned(
        &self,
        params: &ModelParams<T>,
        version: u64,
        segment: &FeatureSequence,
    ) -> Result<Arc<SegmentEncoding<T>>> {
        {
            let inner = self.inner.read().expect("cache lock");
            if inner.version == version {
                if let Some(enc) = inner.entries.get(segment.id()) {
                    return Ok(Arc::clone(enc));
                }
            }
        }
        let enc = Arc::new(encode_segment(params, segment)?);
        let mut inner = self.inner.write().expect("cache lock");
        if inner.version != version {
            inner.entries.clear();
            inner.version = version;
        }
        Ok(Arc::clone(
            inner.entries.entry(segment.id().to_string()).or_insert(enc),
        ))
    }
}
