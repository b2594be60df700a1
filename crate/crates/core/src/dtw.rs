//! Dynamic time warping of a query against a (usually much longer) segment.
//!
//! Subsequence mode lets the alignment start and end anywhere in the segment
//! while covering every query frame. The full `N x M` table is evaluated; no
//! band constraint is applied.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameDistance {
    Euclidean,
    #[default]
    OneMinusCosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DtwMode {
    #[default]
    Subsequence,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostNormalization {
    #[default]
    PathLength,
    QueryLength,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DtwConfig {
    pub frame_distance: FrameDistance,
    pub mode: DtwMode,
    pub normalization: CostNormalization,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DtwResult {
    /// `1 / (1 + normalized cost)`, in `(0, 1]`.
    pub similarity: f64,
    pub raw_cost: f64,
    /// Inclusive segment frame range covered by the path.
    pub best_span: (usize, usize),
    /// `(query_frame, segment_frame)` pairs from start to end.
    pub path: Vec<(usize, usize)>,
}

impl DtwResult {
    pub fn normalized_cost(&self, cfg: &DtwConfig, query_len: usize) -> f64 {
        match cfg.normalization {
            CostNormalization::PathLength => self.raw_cost / self.path.len() as f64,
            CostNormalization::QueryLength => self.raw_cost / query_len as f64,
        }
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Rows prepared for the configured distance: raw for euclidean, unit-norm
/// (zero rows stay zero) for cosine.
fn prepare(seq: &FeatureSequence, distance: FrameDistance) -> Vec<f64> {
    let mut rows = seq.as_f64();
    if distance == FrameDistance::OneMinusCosine {
        for row in rows.chunks_exact_mut(seq.dim()) {
            let norm = dot(row, row).sqrt();
            if norm < 1e-12 {
                row.iter_mut().for_each(|v| *v = 0.0);
            } else {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
    }
    rows
}

#[derive(Clone, Copy)]
#[repr(u8)]
enum Step {
    Start,
    Diagonal,
    Query,
    Segment,
}

pub fn dtw_score(query: &FeatureSequence, segment: &FeatureSequence, cfg: &DtwConfig) -> Result<DtwResult> {
    if query.dim() != segment.dim() {
        return Err(Error::Validation(format!(
            "query {} has dim {}, segment {} has dim {}",
            query.id(),
            query.dim(),
            segment.id(),
            segment.dim()
        )));
    }
    let (n, m, d) = (query.len(), segment.len(), query.dim());
    if n == 0 || m == 0 {
        return Err(Error::Validation("DTW needs nonempty sequences".into()));
    }
    let q = prepare(query, cfg.frame_distance);
    let s = prepare(segment, cfg.frame_distance);
    let dist = |i: usize, j: usize| {
        let (a, b) = (&q[i * d..(i + 1) * d], &s[j * d..(j + 1) * d]);
        match cfg.frame_distance {
            FrameDistance::Euclidean => euclidean(a, b),
            FrameDistance::OneMinusCosine => 1.0 - dot(a, b),
        }
    };

    let subsequence = cfg.mode == DtwMode::Subsequence;
    let mut steps = vec![Step::Start as u8; n * m];
    let mut prev = vec![0.0f64; m];
    let mut cur = vec![0.0f64; m];
    for j in 0..m {
        let d = dist(0, j);
        if subsequence || j == 0 {
            prev[j] = d;
        } else {
            prev[j] = d + prev[j - 1];
            steps[j] = Step::Segment as u8;
        }
    }
    for i in 1..n {
        cur[0] = dist(i, 0) + prev[0];
        steps[i * m] = Step::Query as u8;
        for j in 1..m {
            let (diag, up, left) = (prev[j - 1], prev[j], cur[j - 1]);
            let (best, step) = if diag <= up && diag <= left {
                (diag, Step::Diagonal)
            } else if up <= left {
                (up, Step::Query)
            } else {
                (left, Step::Segment)
            };
            cur[j] = dist(i, j) + best;
            steps[i * m + j] = step as u8;
        }
        std::mem::swap(&mut prev, &mut cur);
    }

    let end = if subsequence {
        (0..m).fold(0, |best, j| if prev[j] < prev[best] { j } else { best })
    } else {
        m - 1
    };
    let raw_cost = prev[end];

    let mut path = Vec::with_capacity(n + m);
    let (mut i, mut j) = (n - 1, end);
    loop {
        path.push((i, j));
        match steps[i * m + j] {
            x if x == Step::Diagonal as u8 => {
                i -= 1;
                j -= 1;
            }
            x if x == Step::Query as u8 => i -= 1,
            x if x == Step::Segment as u8 => j -= 1,
            _ => break,
        }
    }
    path.reverse();
    let best_span = (path[0].1, end);
    let mut result = DtwResult {
        similarity: 0.0,
        raw_cost,
        best_span,
        path,
    };
    result.similarity = 1.0 / (1.0 + result.normalized_cost(cfg, n));
    Ok(result)
}

/// Scores `query` against every segment, in input order.
pub fn dtw_score_batch(
    query: &FeatureSequence,
    segments: &[FeatureSequence],
    cfg: &DtwConfig,
) -> Result<Vec<DtwResult>> {
    segments
        .par_iter()
        .enumerate()
        .map(|(index, seg)| {
            dtw_score(query, seg, cfg).map_err(|e| Error::Batch {
                index,
                source: Box::new(e),
            })
        })
        .collect()
}

/// A min-max affine map fitted on one list of scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Validation("cannot normalize an empty score list".into()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite score {v}")));
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self { min, max })
    }

    /// Maps into `[0, 1]`, clamping values outside the fitted range. A
    /// degenerate range maps everything to 0.5.
    pub fn apply(&self, v: f64) -> f64 {
        if self.max > self.min {
            ((v - self.min) / (self.max - self.min)).clamp(0.0, 1.0)
        } else {
            0.5
        }
    }
}

/// Min-max normalization of teacher scores into `[0, 1]`.
pub fn normalize_teacher_scores(scores: &[f64]) -> Result<Vec<f64>> {
    let mm = MinMax::fit(scores)?;
    Ok(scores.iter().map(|&v| mm.apply(v)).collect())
}

/// CSV rows `query_id,segment_id,similarity,span_start,span_end`.
pub fn results_csv<'a>(rows: impl IntoIterator<Item = (&'a str, &'a str, &'a DtwResult)>) -> String {
    let mut out = String::from("query_id,segment_id,similarity,span_start,span_end\n");
    for (q, s, r) in rows {
        out.push_str(&format!("{q},{s},{},{},{}\n", r.similarity, r.best_span.0, r.best_span.1));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq(rows: &[&[f32]]) -> FeatureSequence {
        FeatureSequence::from_rows("s", rows, 0.01).unwrap()
    }

    fn random_seq(rng: &mut ChaCha8Rng, len: usize, dim: usize) -> FeatureSequence {
        let frames = (0..len * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        FeatureSequence::new("r", frames, dim, 0.01).unwrap()
    }

    fn euclid_cfg(mode: DtwMode) -> DtwConfig {
        DtwConfig {
            frame_distance: FrameDistance::Euclidean,
            mode,
            normalization: CostNormalization::PathLength,
        }
    }

    /// Minimum cost over every monotone step-constrained path, enumerated
    /// exhaustively. Sums run from the start of the path.
    fn brute_force(q: &FeatureSequence, s: &FeatureSequence, mode: DtwMode) -> f64 {
        let (n, m) = (q.len(), s.len());
        let dist = |i: usize, j: usize| {
            let a: Vec<f64> = q.row(i).iter().map(|&v| f64::from(v)).collect();
            let b: Vec<f64> = s.row(j).iter().map(|&v| f64::from(v)).collect();
            a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        };
        fn walk(i: usize, j: usize, acc: f64, n: usize, m: usize, end: Option<usize>, dist: &dyn Fn(usize, usize) -> f64, best: &mut f64) {
            if i == n - 1 && end.map_or(true, |e| j == e) {
                *best = best.min(acc);
            }
            for (di, dj) in [(1, 0), (0, 1), (1, 1)] {
                let (a, b) = (i + di, j + dj);
                if a < n && b < m {
                    walk(a, b, acc + dist(a, b), n, m, end, dist, best);
                }
            }
        }
        let mut best = f64::INFINITY;
        match mode {
            DtwMode::Subsequence => {
                for j0 in 0..m {
                    walk(0, j0, dist(0, j0), n, m, None, &dist, &mut best);
                }
            }
            DtwMode::Global => walk(0, 0, dist(0, 0), n, m, Some(m - 1), &dist, &mut best),
        }
        best
    }

    fn check_path(r: &DtwResult, n: usize) {
        assert_eq!(r.path.first().unwrap().0, 0);
        assert_eq!(r.path.last().unwrap().0, n - 1);
        for w in r.path.windows(2) {
            let step = (w[1].0 - w[0].0, w[1].1 - w[0].1);
            assert!(matches!(step, (1, 0) | (0, 1) | (1, 1)), "bad step {step:?}");
        }
        for &(_, j) in &r.path {
            assert!(r.best_span.0 <= j && j <= r.best_span.1);
        }
    }

    #[test]
    fn identical_sequences_align_for_free() {
        let a = seq(&[&[1.0, 2.0], &[0.5, -1.0], &[3.0, 0.0]]);
        for distance in [FrameDistance::Euclidean, FrameDistance::OneMinusCosine] {
            let cfg = DtwConfig { frame_distance: distance, mode: DtwMode::Global, ..Default::default() };
            let r = dtw_score(&a, &a, &cfg).unwrap();
            assert!(r.raw_cost.abs() < 1e-12);
            assert!((r.similarity - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn finds_embedded_copy() {
        let q = seq(&[&[0.0], &[1.0]]);
        let s = seq(&[&[9.0], &[0.0], &[1.0], &[9.0]]);
        let r = dtw_score(&q, &s, &euclid_cfg(DtwMode::Subsequence)).unwrap();
        assert_eq!(r.raw_cost, 0.0);
        assert_eq!(r.best_span, (1, 2));
        assert_eq!(r.path, vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let q = seq(&[&[0.0]]);
        let s = seq(&[&[0.0, 1.0]]);
        assert!(matches!(dtw_score(&q, &s, &DtwConfig::default()), Err(Error::Validation(_))));
    }

    #[test]
    fn matches_exhaustive_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.gen_range(1..=4);
            let m = rng.gen_range(1..=6);
            let q = random_seq(&mut rng, n, 2);
            let s = random_seq(&mut rng, m, 2);
            for mode in [DtwMode::Subsequence, DtwMode::Global] {
                if mode == DtwMode::Global && m < 1 {
                    continue;
                }
                let r = dtw_score(&q, &s, &euclid_cfg(mode)).unwrap();
                assert_eq!(r.raw_cost, brute_force(&q, &s, mode));
                check_path(&r, n);
            }
        }
    }

    #[test]
    fn batch_matches_single_calls_in_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = random_seq(&mut rng, 3, 4);
        let segs: Vec<_> = (0..5).map(|i| random_seq(&mut rng, 5 + i, 4)).collect();
        let cfg = DtwConfig::default();
        let batch = dtw_score_batch(&q, &segs, &cfg).unwrap();
        for (r, s) in batch.iter().zip(&segs) {
            assert_eq!(r, &dtw_score(&q, s, &cfg).unwrap());
        }
        assert_eq!(dtw_score_batch(&q, &segs[..1], &cfg).unwrap()[0], batch[0]);
        let reversed: Vec<_> = segs.iter().rev().cloned().collect();
        let rb = dtw_score_batch(&q, &reversed, &cfg).unwrap();
        assert!(rb.iter().rev().eq(batch.iter()));
        assert!(dtw_score_batch(&q, &[], &cfg).unwrap().is_empty());
    }

    #[test]
    fn batch_errors_carry_the_index() {
        let q = seq(&[&[0.0]]);
        let segs = vec![seq(&[&[1.0]]), seq(&[&[1.0, 2.0]])];
        match dtw_score_batch(&q, &segs, &DtwConfig::default()) {
            Err(Error::Batch { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn teacher_normalization() {
        assert_eq!(normalize_teacher_scores(&[2.0, 4.0, 6.0]).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize_teacher_scores(&[3.0; 3]).unwrap(), vec![0.5; 3]);
        assert!(normalize_teacher_scores(&[]).is_err());
    }

    proptest! {
        #[test]
        fn normalization_preserves_order(v in prop::collection::vec(-1e3f64..1e3, 1..40)) {
            let out = normalize_teacher_scores(&v).unwrap();
            for i in 0..v.len() {
                for j in 0..v.len() {
                    if v[i] < v[j] { prop_assert!(out[i] <= out[j]); }
                }
                prop_assert!((0.0..=1.0).contains(&out[i]));
            }
        }

        #[test]
        fn paths_are_monotone_and_exact(seed in any::<u64>(), n in 1usize..8, m in 1usize..20, cosine in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random_seq(&mut rng, n, 3);
            let s = random_seq(&mut rng, m, 3);
            let cfg = DtwConfig {
                frame_distance: if cosine { FrameDistance::OneMinusCosine } else { FrameDistance::Euclidean },
                ..Default::default()
            };
            let r = dtw_score(&q, &s, &cfg).unwrap();
            check_path(&r, n);
            let qs = prepare(&q, cfg.frame_distance);
            let ss = prepare(&s, cfg.frame_distance);
            let total: f64 = r.path.iter().map(|&(i, j)| {
                let (a, b) = (&qs[i * 3..i * 3 + 3], &ss[j * 3..j * 3 + 3]);
                if cosine { 1.0 - dot(a, b) } else { euclidean(a, b) }
            }).sum();
            prop_assert!((total - r.raw_cost).abs() <= 1e-9 * r.raw_cost.abs().max(1e-12));
            prop_assert!(r.similarity > 0.0 && r.similarity <= 1.0);
        }

        #[test]
        fn global_cost_is_symmetric(seed in any::<u64>(), n in 1usize..7, m in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_seq(&mut rng, n, 2);
            let b = random_seq(&mut rng, m, 2);
            let cfg = euclid_cfg(DtwMode::Global);
            let ab = dtw_score(&a, &b, &cfg).unwrap().raw_cost;
            let ba = dtw_score(&b, &a, &cfg).unwrap().raw_cost;
            prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
        }

        #[test]
        fn embedded_query_is_found_exactly(seed in any::<u64>(), n in 1usize..6, before in 0usize..10, after in 0usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random_seq(&mut rng, n, 3);
            let pre = random_seq(&mut rng, before.max(1), 3);
            let post = random_seq(&mut rng, after.max(1), 3);
            let mut frames = Vec::new();
            if before > 0 { frames.extend_from_slice(pre.as_slice()); }
            frames.extend_from_slice(q.as_slice());
            if after > 0 { frames.extend_from_slice(post.as_slice()); }
            // Keep the surroundings far away so the copy is the unique optimum.
            let offset = if before > 0 { before * 3 } else { 0 };
            for (k, v) in frames.iter_mut().enumerate() {
                if k < offset || k >= offset + n * 3 { *v += 50.0; }
            }
            let s = FeatureSequence::new("s", frames, 3, 0.01).unwrap();
            let r = dtw_score(&q, &s, &euclid_cfg(DtwMode::Subsequence)).unwrap();
            prop_assert_eq!(r.raw_cost, 0.0);
            let start = if before > 0 { before } else { 0 };
            prop_assert_eq!(r.best_span, (start, start + n - 1));
        }
    }
}
