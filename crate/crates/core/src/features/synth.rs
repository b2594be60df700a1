//! Seeded synthetic query/segment corpus.
//!
//! Each keyword is a smooth random trajectory through feature space
//! (Catmull-Rom interpolation of Gaussian control points). Queries are
//! time-warped, noise-perturbed instances of a keyword. Segments are a run of
//! filler "words" drawn from the same trajectory process, with one keyword
//! instance pasted in at a recorded span for positives, another keyword for
//! a configurable share of the negatives, and nothing for the rest.
//!
//! Optional nuisance dimensions carry a slow per-sequence drift unrelated to
//! content, standing in for speaker and channel variation. Frame-matching
//! baselines see it; a trained model can learn to ignore it.
//!
//! Without nuisance dimensions, positives align to their source keyword with
//! a lower DTW cost than negatives whenever `noise` stays below
//! [`SEPARABLE_NOISE`].

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, FeatureRef, QuerySegmentPair, Split};
use super::normalize::Normalizer;
use super::qbef::write_features;
use super::FeatureSequence;
use crate::error::{Error, Result};

/// Noise level below which, without nuisance dimensions, positive DTW costs
/// sit below negative costs in the median.
pub const SEPARABLE_NOISE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub keywords: usize,
    /// Training pairs generated per training keyword.
    pub pairs_per_keyword: usize,
    /// Held-out pairs per keyword, built from fresh instances.
    pub test_pairs_per_keyword: usize,
    /// The last `holdout_keywords` keywords never appear in training data.
    pub holdout_keywords: usize,
    pub positive_fraction: f64,
    /// Fraction of negatives that embed some other keyword; the rest hold
    /// filler only.
    pub negative_keyword_fraction: f64,
    /// Distinct training query instances per keyword.
    pub queries_per_keyword: usize,
    /// Distinct held-out query instances per keyword.
    pub test_queries_per_keyword: usize,
    /// Inclusive range of un-warped keyword lengths, in frames.
    pub keyword_frames: (usize, usize),
    /// Inclusive range of segment lengths, in frames.
    pub segment_frames: (usize, usize),
    /// Frames between spline control points.
    pub control_spacing: usize,
    pub feature_dim: usize,
    /// Trailing dimensions that carry an independent smooth trajectory per
    /// sequence instead of keyword content.
    pub nuisance_dims: usize,
    /// Amplitude of the nuisance trajectories.
    pub nuisance_scale: f64,
    /// Frames between nuisance control points; large values give a slow
    /// per-sequence drift.
    pub nuisance_spacing: usize,
    /// Standard deviation of i.i.d. Gaussian frame noise.
    pub noise: f64,
    /// Inclusive range of the uniform time-stretch factor.
    pub warp: (f64, f64),
    pub frame_period: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            keywords: 20,
            pairs_per_keyword: 100,
            test_pairs_per_keyword: 25,
            holdout_keywords: 0,
            positive_fraction: 0.5,
            negative_keyword_fraction: 1.0,
            queries_per_keyword: 25,
            test_queries_per_keyword: 5,
            keyword_frames: (10, 14),
            segment_frames: (40, 60),
            control_spacing: 3,
            feature_dim: 12,
            nuisance_dims: 3,
            nuisance_scale: 1.0,
            nuisance_spacing: 1000,
            noise: 0.2,
            warp: (0.8, 1.25),
            frame_period: 0.25,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.keywords == 0 {
            return fail("keyword count must be positive".into());
        }
        if self.holdout_keywords >= self.keywords && self.pairs_per_keyword > 0 {
            return fail("at least one keyword must remain for training".into());
        }
        if self.keywords < 2 {
            return fail("need at least two keywords to build negatives".into());
        }
        if self.queries_per_keyword == 0 || self.test_queries_per_keyword == 0 {
            return fail("query counts per keyword must be positive".into());
        }
        if self.feature_dim == 0 {
            return fail("feature_dim must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return fail("positive_fraction must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.negative_keyword_fraction) {
            return fail("negative_keyword_fraction must lie in [0, 1]".into());
        }
        if self.keyword_frames.0 < 2 || self.keyword_frames.0 > self.keyword_frames.1 {
            return fail("keyword_frames must be an increasing range starting at >= 2".into());
        }
        if self.segment_frames.0 > self.segment_frames.1 {
            return fail("segment_frames must be an increasing range".into());
        }
        if !(self.warp.0 > 0.0 && self.warp.0 <= self.warp.1) {
            return fail("warp must be a positive increasing range".into());
        }
        if self.nuisance_dims >= self.feature_dim {
            return fail("nuisance_dims must leave at least one content dimension".into());
        }
        if self.nuisance_spacing == 0 {
            return fail("nuisance_spacing must be positive".into());
        }
        if !(self.nuisance_scale >= 0.0 && self.nuisance_scale.is_finite()) {
            return fail("nuisance_scale must be a nonnegative finite value".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail("noise must be a nonnegative finite value".into());
        }
        if !(self.frame_period > 0.0) {
            return fail("frame_period must be positive".into());
        }
        if self.control_spacing == 0 {
            return fail("control_spacing must be positive".into());
        }
        if self.max_instance_frames() > self.segment_frames.0 {
            return fail(format!(
                "a warped keyword can span {} frames, longer than the minimum segment of {}",
                self.max_instance_frames(),
                self.segment_frames.0
            ));
        }
        Ok(())
    }

    pub fn max_instance_frames(&self) -> usize {
        warped_len(self.keyword_frames.1, self.warp.1)
    }

    /// Number of keywords available to the training split.
    pub fn training_keywords(&self) -> usize {
        self.keywords - self.holdout_keywords
    }
}

fn warped_len(base: usize, stretch: f64) -> usize {
    ((base as f64 * stretch).round() as usize).max(2)
}

/// A smooth trajectory defined by control points, evaluated by Catmull-Rom
/// interpolation at fractional frame positions.
#[derive(Debug, Clone)]
pub struct Trajectory {
    control: Vec<Vec<f64>>,
    spacing: f64,
    frames: usize,
}

impl Trajectory {
    fn random(rng: &mut ChaCha8Rng, frames: usize, spacing: usize, dim: usize) -> Self {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let points = (frames - 1).div_ceil(spacing) + 1;
        let control = (0..points)
            .map(|_| (0..dim).map(|_| normal.sample(rng)).collect())
            .collect();
        Self {
            control,
            spacing: spacing as f64,
            frames,
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn eval(&self, pos: f64, out: &mut [f64]) {
        let u = pos / self.spacing;
        let last = self.control.len() - 1;
        let i = (u.floor() as usize).min(last.saturating_sub(1));
        let s = u - i as f64;
        let p = |k: isize| &self.control[k.clamp(0, last as isize) as usize];
        let (p0, p1, p2, p3) = (p(i as isize - 1), p(i as isize), p(i as isize + 1), p(i as isize + 2));
        let (s2, s3) = (s * s, s * s * s);
        for (k, o) in out.iter_mut().enumerate() {
            *o = 0.5
                * (2.0 * p1[k]
                    + (-p0[k] + p2[k]) * s
                    + (2.0 * p0[k] - 5.0 * p1[k] + 4.0 * p2[k] - p3[k]) * s2
                    + (-p0[k] + 3.0 * p1[k] - 3.0 * p2[k] + p3[k]) * s3);
        }
    }

    /// `len` frames sampled uniformly over the trajectory's extent.
    pub fn render(&self, len: usize) -> Vec<Vec<f64>> {
        let dim = self.control[0].len();
        let extent = (self.frames - 1) as f64;
        (0..len)
            .map(|t| {
                let pos = if len == 1 { 0.0 } else { t as f64 * extent / (len - 1) as f64 };
                let mut row = vec![0.0; dim];
                self.eval(pos, &mut row);
                row
            })
            .collect()
    }
}

/// The generated corpus held in memory.
pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    pub sequences: BTreeMap<String, FeatureSequence>,
    /// Clean, un-warped keyword renderings, indexed by keyword number.
    pub keywords: Vec<FeatureSequence>,
    pub config: SynthConfig,
}

impl SyntheticDataset {
    pub fn sequence(&self, id: &str) -> &FeatureSequence {
        &self.sequences[id]
    }

    /// Writes the manifest and one QBEF file per sequence into `out_dir`.
    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let feature_dir = out_dir.join("features");
        fs::create_dir_all(&feature_dir).map_err(|e| Error::io(&feature_dir, e))?;
        for (id, seq) in &self.sequences {
            write_features(seq, feature_dir.join(format!("{id}.qbef")))?;
        }
        self.manifest.save(out_dir.join("manifest.json"))
    }
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    rng: ChaCha8Rng,
    keywords: Vec<Trajectory>,
    sequences: BTreeMap<String, FeatureSequence>,
    queries: Vec<FeatureRef>,
    segments: Vec<FeatureRef>,
    pairs: Vec<QuerySegmentPair>,
}

impl Generator<'_> {
    fn add_noise(&mut self, rows: &mut [Vec<f64>]) {
        if self.cfg.noise == 0.0 {
            return;
        }
        let normal = Normal::new(0.0, self.cfg.noise).unwrap();
        for row in rows {
            for v in row {
                *v += normal.sample(&mut self.rng);
            }
        }
    }

    fn instance(&mut self, keyword: usize) -> Vec<Vec<f64>> {
        let stretch = if self.cfg.warp.0 == self.cfg.warp.1 {
            self.cfg.warp.0
        } else {
            self.rng.gen_range(self.cfg.warp.0..=self.cfg.warp.1)
        };
        let len = warped_len(self.keywords[keyword].frames(), stretch);
        let mut rows = self.keywords[keyword].render(len);
        self.add_noise(&mut rows);
        rows
    }

    /// Overwrites the nuisance dimensions with a fresh smooth trajectory
    /// spanning the whole sequence.
    fn add_nuisance(&mut self, rows: &mut [Vec<f64>]) {
        let k = self.cfg.nuisance_dims;
        if k == 0 || rows.is_empty() {
            return;
        }
        let d = self.cfg.feature_dim;
        let spacing = self.cfg.nuisance_spacing;
        let len = rows.len();
        let traj = Trajectory::random(&mut self.rng, len.max(2), spacing, k);
        for (row, n) in rows.iter_mut().zip(traj.render(len)) {
            for (v, x) in row[d - k..].iter_mut().zip(n) {
                *v = self.cfg.nuisance_scale * x;
            }
        }
    }

    fn store(&mut self, id: String, rows: &[Vec<f64>]) {
        let frames: Vec<f32> = rows.iter().flatten().map(|&v| v as f32).collect();
        let seq = FeatureSequence::new(id.clone(), frames, self.cfg.feature_dim, self.cfg.frame_period)
            .expect("generator produced an invalid sequence");
        self.sequences.insert(id, seq);
    }

    fn filler_background(&mut self, len: usize) -> Vec<Vec<f64>> {
        let mut rows = Vec::with_capacity(len + self.cfg.keyword_frames.1);
        while rows.len() < len {
            let n = self.rng.gen_range(self.cfg.keyword_frames.0..=self.cfg.keyword_frames.1);
            let word = Trajectory::random(&mut self.rng, n, self.cfg.control_spacing, self.cfg.feature_dim);
            rows.extend(word.render(n));
        }
        rows.truncate(len);
        rows
    }

    /// Returns the segment id and, when a keyword was pasted, its span.
    fn segment(&mut self, id: String, embed: Option<usize>) -> Option<(usize, usize)> {
        let len = self.rng.gen_range(self.cfg.segment_frames.0..=self.cfg.segment_frames.1);
        let mut rows = self.filler_background(len);
        self.add_noise(&mut rows);
        let span = embed.map(|kw| {
            let instance = self.instance(kw);
            let start = self.rng.gen_range(0..=len - instance.len());
            let end = start + instance.len() - 1;
            rows.splice(start..=end, instance);
            (start, end)
        });
        self.add_nuisance(&mut rows);
        self.store(id.clone(), &rows);
        self.segments.push(FeatureRef {
            id: id.clone(),
            path: format!("features/{id}.qbef"),
            keyword: embed.map(|k| keyword_name(k)),
        });
        span
    }

    fn split_pairs(&mut self, split: Split, pool: &[usize], targets: &[usize], per_keyword: usize) {
        let (tag, query_count) = match split {
            Split::Train => ("train", self.cfg.queries_per_keyword),
            Split::Test => ("test", self.cfg.test_queries_per_keyword),
        };
        for &kw in targets {
            let query_ids: Vec<String> = (0..query_count)
                .map(|i| format!("q_{tag}_{}_{i}", keyword_name(kw)))
                .collect();
            for id in &query_ids {
                let mut rows = self.instance(kw);
                self.add_nuisance(&mut rows);
                self.store(id.clone(), &rows);
                self.queries.push(FeatureRef {
                    id: id.clone(),
                    path: format!("features/{id}.qbef"),
                    keyword: Some(keyword_name(kw)),
                });
            }
            let positives = (per_keyword as f64 * self.cfg.positive_fraction).round() as usize;
            let others: Vec<usize> = pool.iter().copied().filter(|&k| k != kw).collect();
            for i in 0..per_keyword {
                let seg_id = format!("s_{tag}_{}_{i:04}", keyword_name(kw));
                let positive = i < positives;
                let embed = if positive {
                    Some(kw)
                } else if spreads_to(i - positives, self.cfg.negative_keyword_fraction) && !others.is_empty() {
                    others.choose(&mut self.rng).copied()
                } else {
                    None
                };
                let span = self.segment(seg_id.clone(), embed);
                self.pairs.push(QuerySegmentPair {
                    query_id: query_ids[i % query_ids.len()].clone(),
                    segment_id: seg_id,
                    label: Some(positive),
                    teacher_score: None,
                    span: if positive { span } else { None },
                    split,
                });
            }
        }
    }
}

/// Whether the `j`-th item of an evenly spread `fraction` is selected.
fn spreads_to(j: usize, fraction: f64) -> bool {
    ((j + 1) as f64 * fraction).floor() > (j as f64 * fraction).floor()
}

pub fn keyword_name(k: usize) -> String {
    format!("kw{k:03}")
}

/// Builds the corpus in memory. Deterministic given `config.seed`.
pub fn generate_synthetic_dataset(config: &SynthConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let keywords: Vec<Trajectory> = (0..config.keywords)
        .map(|_| {
            let n = rng.gen_range(config.keyword_frames.0..=config.keyword_frames.1);
            Trajectory::random(&mut rng, n, config.control_spacing, config.feature_dim)
        })
        .collect();
    let mut gen = Generator {
        cfg: config,
        rng,
        keywords,
        sequences: BTreeMap::new(),
        queries: Vec::new(),
        segments: Vec::new(),
        pairs: Vec::new(),
    };
    let all: Vec<usize> = (0..config.keywords).collect();
    let seen: Vec<usize> = (0..config.training_keywords()).collect();
    if config.pairs_per_keyword > 0 {
        gen.split_pairs(Split::Train, &seen, &seen, config.pairs_per_keyword);
    }
    if config.test_pairs_per_keyword > 0 {
        // With held-out keywords, the test split covers exactly those.
        let targets: Vec<usize> = if config.holdout_keywords > 0 {
            (config.training_keywords()..config.keywords).collect()
        } else {
            all.clone()
        };
        gen.split_pairs(Split::Test, &all, &targets, config.test_pairs_per_keyword);
    }

    let keyword_rows: Vec<FeatureSequence> = gen
        .keywords
        .iter()
        .enumerate()
        .map(|(k, traj)| {
            let rows = traj.render(traj.frames());
            let frames = rows.iter().flatten().map(|&v| v as f32).collect();
            FeatureSequence::new(keyword_name(k), frames, config.feature_dim, config.frame_period)
                .expect("keyword rendering is valid")
        })
        .collect();

    let train_ids: std::collections::BTreeSet<&str> = gen
        .pairs
        .iter()
        .filter(|p| p.split == Split::Train)
        .flat_map(|p| [p.query_id.as_str(), p.segment_id.as_str()])
        .collect();
    let normalization = if train_ids.is_empty() {
        None
    } else {
        Some(Normalizer::fit(train_ids.iter().map(|id| &gen.sequences[*id]))?)
    };

    let manifest = DatasetManifest {
        feature_dim: config.feature_dim,
        queries: gen.queries,
        segments: gen.segments,
        pairs: gen.pairs,
        normalization,
        run_config: None,
    };
    manifest.validate_structure()?;
    Ok(SyntheticDataset {
        manifest,
        sequences: gen.sequences,
        keywords: keyword_rows,
        config: config.clone(),
    })
}
