//! Supervised and distillation training with ADAM, seeded batching and
//! best-by-validation-loss checkpointing.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::{mean_average_precision, rankings_from_scores};
use crate::features::{QuerySegmentPair, Split};
use crate::model::scoring::{forward_backward, pair_loss, score_encoded};
use crate::model::{save_checkpoint, Confidence, ModelConfig, ModelParams, SegmentEncoding, Target};
use crate::tensor::lstm::lstm_encode;
use crate::tensor::{AdamConfig, AdamState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Binary classification against pair labels.
    Supervised,
    /// Regression onto teacher scores.
    Distill,
}

impl TrainMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::Supervised => "supervised",
            TrainMode::Distill => "distill",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub model: ModelConfig,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    pub val_fraction: f64,
    pub clip_norm: f64,
}

impl TrainConfig {
    pub fn new(mode: TrainMode, model: ModelConfig) -> Self {
        Self {
            mode,
            epochs: 100,
            batch_size: 32,
            seed: 0,
            adam: AdamConfig::default(),
            model,
            patience: None,
            val_fraction: 0.1,
            clip_norm: 5.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("validation fraction {} not in [0, 1)", self.val_fraction)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip norm must be positive".into()));
        }
        self.model.validate()
    }
}

/// Derives an independent seed for a named consumer of randomness.
pub fn sub_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for &b in name.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_map: Option<f64>,
    pub seconds: f64,
}

impl EpochReport {
    pub fn progress_line(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"));
        format!(
            "epoch={} train_loss={:.6} val_loss={} val_map={}",
            self.epoch,
            self.train_loss,
            opt(self.val_loss),
            opt(self.val_map)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: TrainMode,
    pub epochs: Vec<EpochReport>,
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub checkpoint: Option<PathBuf>,
    pub wall_seconds: f64,
    pub notices: Vec<String>,
}

/// One pair ready for the optimizer: features as `f64` rows and a target.
#[derive(Debug, Clone)]
pub struct Example {
    pub pair_id: String,
    pub query_id: String,
    pub segment_id: String,
    pub query: Vec<f64>,
    pub query_len: usize,
    pub segment: Vec<f64>,
    pub segment_len: usize,
    pub target: Target,
    /// Relevance used only for reporting validation MAP.
    pub relevant: Option<bool>,
}

fn target_of(mode: TrainMode, p: &QuerySegmentPair) -> Result<Target> {
    match mode {
        TrainMode::Supervised => p.label.map(Target::Label).ok_or_else(|| {
            Error::Validation(format!("pair {} has no label; supervised training needs labels", p.pair_id()))
        }),
        TrainMode::Distill => p.teacher_score.map(Target::Score).ok_or_else(|| {
            Error::Validation(format!(
                "pair {} has no teacher score; run cmd_teacher first (qbestd teacher)",
                p.pair_id()
            ))
        }),
    }
}

/// Builds examples for `pairs`. In distillation mode labels are never read
/// into targets.
pub fn build_examples(dataset: &Dataset, pairs: &[&QuerySegmentPair], mode: TrainMode, with_relevance: bool) -> Result<Vec<Example>> {
    pairs
        .iter()
        .map(|p| {
            let q = dataset.sequence(&p.query_id)?;
            let s = dataset.sequence(&p.segment_id)?;
            Ok(Example {
                pair_id: p.pair_id(),
                query_id: p.query_id.clone(),
                segment_id: p.segment_id.clone(),
                query: q.as_f64(),
                query_len: q.len(),
                segment: s.as_f64(),
                segment_len: s.len(),
                target: target_of(mode, p)?,
                relevant: if with_relevance { p.label } else { None },
            })
        })
        .collect()
}

/// Splits pairs into train and validation sets by holding out whole queries:
/// `round(fraction * q)` of the `q` distinct queries, at least one when
/// `fraction > 0` and `q >= 2`.
pub fn query_split<'a>(
    pairs: &[&'a QuerySegmentPair],
    fraction: f64,
    seed: u64,
) -> (Vec<&'a QuerySegmentPair>, Vec<&'a QuerySegmentPair>) {
    let mut queries: Vec<&str> = pairs.iter().map(|p| p.query_id.as_str()).collect();
    queries.sort_unstable();
    queries.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    queries.shuffle(&mut rng);
    let mut k = (fraction * queries.len() as f64).round() as usize;
    if fraction > 0.0 && queries.len() >= 2 {
        k = k.clamp(1, queries.len() - 1);
    }
    let held: BTreeSet<&str> = queries[..k].iter().copied().collect();
    pairs.iter().partition(|p| !held.contains(p.query_id.as_str()))
}

/// Mean loss and summed gradients over `batch`, reduced in batch order.
pub fn batch_gradient(params: &ModelParams<f64>, batch: &[&Example]) -> Result<(f64, ModelParams<f64>)> {
    let results: Vec<Result<(f64, ModelParams<f64>)>> = batch
        .par_iter()
        .map(|ex| {
            let mut g = params.zeros_like();
            let loss = forward_backward(params, &ex.query, ex.query_len, &ex.segment, ex.segment_len, ex.target, &mut g)
                .map_err(|e| match e {
                    Error::Diverged(msg) => Error::Diverged(format!("pair {}: {msg}", ex.pair_id)),
                    other => other,
                })?;
            Ok((loss, g))
        })
        .collect();
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    for r in results {
        let (l, g) = r?;
        loss += l;
        total.accumulate(&g);
    }
    let n = batch.len() as f64;
    total.scale(1.0 / n);
    Ok((loss / n, total))
}

/// One clipped ADAM step on `batch`. Returns the batch loss before the step.
pub fn train_step(params: &mut ModelParams<f64>, adam: &mut AdamState, batch: &[&Example], clip_norm: f64) -> Result<f64> {
    let (loss, mut grads) = batch_gradient(params, batch)?;
    if !loss.is_finite() || !grads.all_finite() {
        return Err(Error::Diverged(format!("non-finite loss {loss} or gradient")));
    }
    let norm = grads.global_norm();
    if norm > clip_norm {
        grads.scale(clip_norm / norm);
    }
    let g = grads.tensors();
    adam.step(&mut params.tensors_mut(), &g)?;
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub map: Option<f64>,
}

/// Frozen-parameter pass over `examples`: mean loss, and MAP when every
/// example carries relevance.
pub fn evaluate_epoch(params: &ModelParams<f64>, examples: &[Example]) -> Result<Option<EvalResult>> {
    if examples.is_empty() {
        return Ok(None);
    }
    let scored: Vec<Result<(f64, f64)>> = examples
        .par_iter()
        .map(|ex| {
            let conf = score_example(params, ex)?;
            Ok((conf.score, pair_loss(params.config.detector, &conf, ex.target)))
        })
        .collect();
    let mut scores = Vec::with_capacity(examples.len());
    let mut loss = 0.0;
    for r in scored {
        let (s, l) = r?;
        scores.push(s);
        loss += l;
    }
    let map = if examples.iter().all(|e| e.relevant.is_some()) {
        let rankings = rankings_from_scores(
            examples
                .iter()
                .zip(&scores)
                .map(|(e, &s)| (e.query_id.clone(), e.segment_id.clone(), s, e.relevant)),
        )?;
        mean_average_precision(&rankings).ok().map(|r| r.map)
    } else {
        None
    };
    Ok(Some(EvalResult {
        loss: loss / examples.len() as f64,
        map,
    }))
}

/// Parameters as they read back from a checkpoint.
pub fn storage_rounded(params: &ModelParams<f64>) -> ModelParams<f64> {
    params.cast::<f32>().cast::<f64>()
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Written whenever the validation loss improves.
    pub checkpoint: Option<PathBuf>,
    pub run_config: Option<serde_json::Value>,
    pub on_epoch: Option<&'a (dyn Fn(&EpochReport) + Sync)>,
    /// Initial parameters; seeded initialization when absent.
    pub init: Option<ModelParams<f64>>,
}

pub struct TrainOutcome {
    /// Best parameters, rounded to checkpoint precision.
    pub params: ModelParams<f64>,
    pub report: TrainReport,
}

fn check_classes(examples: &[Example]) -> Result<()> {
    let pos = examples.iter().filter(|e| e.target == Target::Label(true)).count();
    if pos == 0 || pos == examples.len() {
        return Err(Error::Validation(format!(
            "supervised training needs both classes; got {pos} positives out of {}",
            examples.len()
        )));
    }
    Ok(())
}

/// Trains on the dataset's training split.
pub fn train(dataset: &Dataset, config: &TrainConfig, options: TrainOptions<'_>) -> Result<TrainOutcome> {
    config.validate()?;
    if config.model.feature_dim != dataset.feature_dim() {
        return Err(Error::Validation(format!(
            "model feature dim {} does not match dataset dim {}",
            config.model.feature_dim,
            dataset.feature_dim()
        )));
    }
    let start = Instant::now();
    let all = dataset.pairs(Split::Train);
    if all.is_empty() {
        return Err(Error::InsufficientData("no training pairs".into()));
    }
    let (train_pairs, val_pairs) = query_split(&all, config.val_fraction, sub_seed(config.seed, "split"));
    let with_relevance = val_pairs.iter().all(|p| p.label.is_some());
    let train_set = build_examples(dataset, &train_pairs, config.mode, false)?;
    let val_set = build_examples(dataset, &val_pairs, config.mode, with_relevance)?;
    if config.mode == TrainMode::Supervised {
        check_classes(&train_set)?;
    }
    let mut notices = Vec::new();
    if val_set.is_empty() {
        notices.push("validation set is empty; selecting the checkpoint by training loss".to_string());
    }

    let mut params = match options.init {
        Some(p) => {
            if p.config != config.model {
                return Err(Error::Validation("initial parameters do not match the model config".into()));
            }
            p
        }
        None => ModelParams::init(&config.model, sub_seed(config.seed, "init"))?,
    };
    let mut adam = AdamState::new(config.adam, &params.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, "shuffle"));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let normalization = dataset.manifest.normalization.as_ref();

    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ModelParams<f64>)> = None;
    let mut since_best = 0;
    for epoch in 1..=config.epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            let loss = train_step(&mut params, &mut adam, &batch, config.clip_norm)
                .map_err(|e| match e {
                    Error::Diverged(msg) => Error::Diverged(format!("epoch {epoch}: {msg}")),
                    other => other,
                })?;
            total += loss * batch.len() as f64;
        }
        let train_loss = total / train_set.len() as f64;
        let rounded = storage_rounded(&params);
        let val = evaluate_epoch(&rounded, &val_set)?;
        let report = EpochReport {
            epoch,
            train_loss,
            val_loss: val.map(|v| v.loss),
            val_map: val.and_then(|v| v.map),
            seconds: t0.elapsed().as_secs_f64(),
        };
        if let Some(cb) = options.on_epoch {
            cb(&report);
        }
        let key = report.val_loss.unwrap_or(train_loss);
        epochs.push(report);
        if best.as_ref().map_or(true, |(b, _, _)| key < *b) {
            if let Some(path) = &options.checkpoint {
                save_checkpoint(path, &rounded, normalization, options.run_config.as_ref())?;
            }
            best = Some((key, epoch, rounded));
            since_best = 0;
        } else {
            since_best += 1;
            if config.patience.is_some_and(|p| since_best >= p) {
                notices.push(format!("early stop after epoch {epoch}"));
                break;
            }
        }
    }
    let (best_loss, best_epoch, best_params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        params: best_params,
        report: TrainReport {
            mode: config.mode,
            best_epoch,
            best_val_loss: (!val_set.is_empty()).then_some(best_loss),
            epochs,
            train_pairs: train_set.len(),
            val_pairs: val_set.len(),
            checkpoint: options.checkpoint,
            wall_seconds: start.elapsed().as_secs_f64(),
            notices,
        },
    })
}

pub fn train_supervised(dataset: &Dataset, config: &TrainConfig, options: TrainOptions<'_>) -> Result<TrainOutcome> {
    if config.mode != TrainMode::Supervised {
        return Err(Error::Config("train_supervised needs mode=supervised".into()));
    }
    train(dataset, config, options)
}

pub fn train_distill(dataset: &Dataset, config: &TrainConfig, options: TrainOptions<'_>) -> Result<TrainOutcome> {
    if config.mode != TrainMode::Distill {
        return Err(Error::Config("train_distill needs mode=distill".into()));
    }
    train(dataset, config, options)
}

fn score_example(params: &ModelParams<f64>, ex: &Example) -> Result<Confidence> {
    let (q, _) = lstm_encode(&params.lstm, &ex.query, ex.query_len)?;
    let (_, all) = lstm_encode(&params.lstm, &ex.segment, ex.segment_len)?;
    let enc = SegmentEncoding::new(ex.segment_id.clone(), all, params.config.hidden_dim);
    Ok(score_encoded(params, &q, &enc)?.0)
}

/// Scores every example with frozen parameters, in order.
pub fn score_examples(params: &ModelParams<f64>, examples: &[Example]) -> Result<Vec<f64>> {
    examples.par_iter().map(|ex| score_example(params, ex).map(|c| c.score)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::synth::{generate_synthetic_dataset, SynthConfig};
    use crate::model::{load_checkpoint, Detector};

    fn tiny(seed: u64) -> Dataset {
        let cfg = SynthConfig {
            keywords: 2,
            pairs_per_keyword: 32,
            test_pairs_per_keyword: 0,
            queries_per_keyword: 4,
            nuisance_dims: 0,
            seed,
            ..SynthConfig::default()
        };
        Dataset::from_synthetic(&generate_synthetic_dataset(&cfg).unwrap()).unwrap()
    }

    fn config(mode: TrainMode, epochs: usize) -> TrainConfig {
        let mut cfg = TrainConfig::new(mode, ModelConfig::desk(12, 1, Detector::Nn));
        cfg.epochs = epochs;
        cfg
    }

    #[test]
    fn separable_set_is_learned() {
        let ds = tiny(1);
        assert_eq!(ds.pairs(Split::Train).len(), 64);
        let mut cfg = config(TrainMode::Supervised, 150);
        cfg.adam.lr = 3e-3;
        let out = train(&ds, &cfg, TrainOptions::default()).unwrap();
        let last = out.report.epochs.last().unwrap().train_loss;
        assert!(last < 0.1 * 2f64.ln(), "final training loss {last}");
    }

    #[test]
    fn same_seed_gives_same_curve() {
        let ds = tiny(2);
        let cfg = config(TrainMode::Supervised, 3);
        let a = train(&ds, &cfg, TrainOptions::default()).unwrap();
        let b = train(&ds, &cfg, TrainOptions::default()).unwrap();
        let curve = |r: &TrainReport| r.epochs.iter().map(|e| (e.train_loss, e.val_loss)).collect::<Vec<_>>();
        assert_eq!(curve(&a.report), curve(&b.report));
        assert_eq!(a.params, b.params);
        assert_eq!(a.report.epochs.len(), 3);
    }

    #[test]
    fn single_class_labels_are_rejected() {
        let mut ds = tiny(3);
        for p in &mut ds.manifest.pairs {
            p.label = Some(true);
        }
        let err = train(&ds, &config(TrainMode::Supervised, 1), TrainOptions::default()).err().unwrap();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn constant_teacher_is_regressed_without_labels() {
        let mut ds = tiny(4);
        for p in &mut ds.manifest.pairs {
            p.label = None;
            p.teacher_score = Some(0.5);
        }
        let out = train(&ds, &config(TrainMode::Distill, 30), TrainOptions::default()).unwrap();
        let last = out.report.epochs.last().unwrap();
        assert!(last.train_loss < 0.01, "final MSE {}", last.train_loss);
        assert!(last.val_map.is_none());
    }

    #[test]
    fn missing_teacher_scores_name_the_fix() {
        let ds = tiny(5);
        let err = train_distill(&ds, &config(TrainMode::Distill, 1), TrainOptions::default()).err().unwrap();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("run cmd_teacher first"), "{err}");
    }

    #[test]
    fn entry_points_check_the_mode() {
        let ds = tiny(5);
        assert!(train_supervised(&ds, &config(TrainMode::Distill, 1), TrainOptions::default()).is_err());
        assert!(train_distill(&ds, &config(TrainMode::Supervised, 1), TrainOptions::default()).is_err());
    }

    #[test]
    fn small_step_descends_on_a_frozen_batch() {
        let ds = tiny(6);
        let pairs = ds.pairs(Split::Train);
        let examples = build_examples(&ds, &pairs[..16], TrainMode::Supervised, false).unwrap();
        let batch: Vec<&Example> = examples.iter().collect();
        let adam = AdamConfig { lr: 1e-4, ..AdamConfig::default() };
        let mut descended = 0;
        for seed in 0..10 {
            let mut params = ModelParams::init(&ModelConfig::desk(12, 1, Detector::Nn), seed).unwrap();
            let mut state = AdamState::new(adam, &params.tensors());
            let before = train_step(&mut params, &mut state, &batch, 5.0).unwrap();
            let (after, _) = batch_gradient(&params, &batch).unwrap();
            descended += usize::from(after < before);
        }
        assert!(descended >= 9, "{descended}/10 seeds descended");
    }

    #[test]
    fn parameter_hash_changes_only_with_a_step() {
        let ds = tiny(7);
        let pairs = ds.pairs(Split::Train);
        let examples = build_examples(&ds, &pairs[..8], TrainMode::Supervised, true).unwrap();
        let batch: Vec<&Example> = examples.iter().collect();
        let mut params = ModelParams::init(&ModelConfig::desk(12, 1, Detector::Nn), 0).unwrap();
        let mut state = AdamState::new(AdamConfig::default(), &params.tensors());
        let h0 = params.version_hash();
        batch_gradient(&params, &batch).unwrap();
        evaluate_epoch(&params, &examples).unwrap();
        assert_eq!(params.version_hash(), h0);
        train_step(&mut params, &mut state, &batch, 5.0).unwrap();
        assert_ne!(params.version_hash(), h0);
    }

    #[test]
    fn checkpoint_reproduces_validation_loss() {
        let ds = tiny(8);
        let cfg = config(TrainMode::Supervised, 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.qbem");
        let out = train(&ds, &cfg, TrainOptions { checkpoint: Some(path.clone()), ..TrainOptions::default() }).unwrap();
        let (loaded, header) = load_checkpoint(&path).unwrap();
        assert_eq!(header.model, cfg.model);
        let all = ds.pairs(Split::Train);
        let (_, val) = query_split(&all, cfg.val_fraction, sub_seed(cfg.seed, "split"));
        let examples = build_examples(&ds, &val, cfg.mode, true).unwrap();
        let loss = evaluate_epoch(&loaded, &examples).unwrap().unwrap().loss;
        let recorded = out.report.best_val_loss.unwrap();
        assert!((loss - recorded).abs() / recorded < 1e-6);
        assert_eq!(loaded, out.params);
    }

    #[test]
    fn empty_validation_set_is_skipped() {
        let params = ModelParams::init(&ModelConfig::desk(12, 1, Detector::Nn), 0).unwrap();
        assert_eq!(evaluate_epoch(&params, &[]).unwrap(), None);
        let ds = tiny(9);
        let mut cfg = config(TrainMode::Supervised, 1);
        cfg.val_fraction = 0.0;
        let out = train(&ds, &cfg, TrainOptions::default()).unwrap();
        assert_eq!(out.report.val_pairs, 0);
        assert!(out.report.best_val_loss.is_none());
        assert!(!out.report.notices.is_empty());
    }

    #[test]
    fn query_split_holds_out_whole_queries() {
        let ds = tiny(10);
        let all = ds.pairs(Split::Train);
        let (train, val) = query_split(&all, 0.25, 1);
        assert_eq!(train.len() + val.len(), all.len());
        let held: BTreeSet<&str> = val.iter().map(|p| p.query_id.as_str()).collect();
        assert_eq!(held.len(), 2);
        assert!(train.iter().all(|p| !held.contains(p.query_id.as_str())));
        assert_eq!(query_split(&all, 0.25, 1).1, val);
        let (_, none) = query_split(&all, 0.0, 1);
        assert!(none.is_empty());
    }

    #[test]
    fn progress_line_format() {
        let r = EpochReport { epoch: 3, train_loss: 0.5, val_loss: Some(0.25), val_map: None, seconds: 1.0 };
        assert_eq!(r.progress_line(), "epoch=3 train_loss=0.500000 val_loss=0.250000 val_map=nan");
    }

    #[test]
    fn sub_seeds_differ_by_name() {
        assert_ne!(sub_seed(1, "init"), sub_seed(1, "shuffle"));
        assert_ne!(sub_seed(1, "init"), sub_seed(2, "init"));
        assert_eq!(sub_seed(1, "init"), sub_seed(1, "init"));
    }
}
