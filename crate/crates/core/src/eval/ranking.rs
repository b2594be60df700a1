use std::collections::{BTreeMap, HashSet};

use crate::dtw::MinMax;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RankedEntry {
    pub segment_id: String,
    pub score: f64,
    pub relevant: Option<bool>,
}

/// One query's segments ordered by descending score, ties by ascending
/// segment id.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredRanking {
    pub query_id: String,
    entries: Vec<RankedEntry>,
}

impl ScoredRanking {
    pub fn new(query_id: impl Into<String>, mut entries: Vec<RankedEntry>) -> Result<Self> {
        let query_id = query_id.into();
        if let Some(e) = entries.iter().find(|e| !e.score.is_finite()) {
            return Err(Error::Data(format!("{query_id}/{}: non-finite score", e.segment_id)));
        }
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            if !seen.insert(e.segment_id.as_str()) {
                return Err(Error::Validation(format!(
                    "query {query_id}: segment {} ranked twice",
                    e.segment_id
                )));
            }
        }
        entries.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.segment_id.cmp(&b.segment_id)));
        Ok(Self { query_id, entries })
    }

    pub fn entries(&self) -> &[RankedEntry] {
        &self.entries
    }

    pub fn segment_ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.segment_id.as_str()).collect()
    }
}

/// Mean of precision at each relevant rank. `None` when nothing is relevant.
pub fn average_precision(ranking: &ScoredRanking) -> Result<Option<f64>> {
    let mut hits = 0usize;
    let mut total = 0.0;
    for (k, e) in ranking.entries.iter().enumerate() {
        let rel = e.relevant.ok_or_else(|| {
            Error::Validation(format!(
                "query {}: segment {} has no relevance judgement",
                ranking.query_id, e.segment_id
            ))
        })?;
        if rel {
            hits += 1;
            total += hits as f64 / (k + 1) as f64;
        }
    }
    Ok((hits > 0).then(|| total / hits as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapReport {
    pub map: f64,
    pub per_query: Vec<(String, f64)>,
    /// Queries without any relevant segment, left out of the mean.
    pub excluded: Vec<String>,
}

pub fn mean_average_precision(rankings: &[ScoredRanking]) -> Result<MapReport> {
    let mut per_query = Vec::with_capacity(rankings.len());
    let mut excluded = Vec::new();
    for r in rankings {
        match average_precision(r)? {
            Some(ap) => per_query.push((r.query_id.clone(), ap)),
            None => excluded.push(r.query_id.clone()),
        }
    }
    if per_query.is_empty() {
        return Err(Error::InsufficientData(
            "no query has a relevant segment; MAP is undefined".into(),
        ));
    }
    let map = per_query.iter().map(|(_, ap)| ap).sum::<f64>() / per_query.len() as f64;
    Ok(MapReport {
        map,
        per_query,
        excluded,
    })
}

/// Groups `(query_id, segment_id, score, relevant)` rows into rankings,
/// ordered by query id.
pub fn rankings_from_scores<Q, S>(rows: impl IntoIterator<Item = (Q, S, f64, Option<bool>)>) -> Result<Vec<ScoredRanking>>
where
    Q: Into<String>,
    S: Into<String>,
{
    let mut groups: BTreeMap<String, Vec<RankedEntry>> = BTreeMap::new();
    for (q, s, score, relevant) in rows {
        groups.entry(q.into()).or_default().push(RankedEntry {
            segment_id: s.into(),
            score,
            relevant,
        });
    }
    groups.into_iter().map(|(q, e)| ScoredRanking::new(q, e)).collect()
}

/// Min-max normalizes both score lists and mixes them with the given weights.
pub fn fuse_scores(dtw: &ScoredRanking, model: &ScoredRanking, w_dtw: f64, w_model: f64) -> Result<ScoredRanking> {
    if !(w_dtw >= 0.0 && w_model >= 0.0 && (w_dtw + w_model - 1.0).abs() < 1e-9) {
        return Err(Error::Validation(format!(
            "fusion weights must be non-negative and sum to 1, got {w_dtw} and {w_model}"
        )));
    }
    if dtw.query_id != model.query_id {
        return Err(Error::Validation(format!(
            "cannot fuse rankings of queries {} and {}",
            dtw.query_id, model.query_id
        )));
    }
    let mut a: Vec<&RankedEntry> = dtw.entries.iter().collect();
    let mut b: Vec<&RankedEntry> = model.entries.iter().collect();
    a.sort_by(|x, y| x.segment_id.cmp(&y.segment_id));
    b.sort_by(|x, y| x.segment_id.cmp(&y.segment_id));
    if a.len() != b.len() || a.iter().zip(&b).any(|(x, y)| x.segment_id != y.segment_id) {
        return Err(Error::Validation(format!(
            "query {}: DTW and model rankings cover different segments",
            dtw.query_id
        )));
    }
    let scores = |v: &[&RankedEntry]| v.iter().map(|e| e.score).collect::<Vec<_>>();
    let na = MinMax::fit(&scores(&a))?;
    let nb = MinMax::fit(&scores(&b))?;
    let fused = a
        .iter()
        .zip(&b)
        .map(|(x, y)| RankedEntry {
            segment_id: x.segment_id.clone(),
            score: w_dtw * na.apply(x.score) + w_model * nb.apply(y.score),
            relevant: y.relevant.or(x.relevant),
        })
        .collect();
    ScoredRanking::new(dtw.query_id.clone(), fused)
}

/// CSV `query_id,rank,segment_id,score,relevant` with 1-based ranks.
pub fn rankings_csv(rankings: &[ScoredRanking]) -> String {
    let mut out = String::from("query_id,rank,segment_id,score,relevant\n");
    for r in rankings {
        for (k, e) in r.entries.iter().enumerate() {
            let rel = match e.relevant {
                Some(true) => "1",
                Some(false) => "0",
                None => "",
            };
            out.push_str(&format!("{},{},{},{},{rel}\n", r.query_id, k + 1, e.segment_id, e.score));
        }
    }
    out
}
