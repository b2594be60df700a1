use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::json;

use qbestd::dataset::{base_dir, Dataset, SearchItem};
use qbestd::dtw::{dtw_score, results_csv, DtwConfig, FrameDistance};
use qbestd::eval::{
    annotate_teacher_scores, attention_records, benchmark_runtime, fuse_scores, localize_attention,
    mean_average_precision, pairs_map, rankings_csv, rankings_from_scores, score_pairs_dtw, score_pairs_model,
    score_pairs_traced, BenchConfig, MapReport, ScoredRanking,
};
use qbestd::features::mfcc::extract_mfcc;
use qbestd::features::synth::{generate_synthetic_dataset, SynthConfig};
use qbestd::features::wav::read_wav;
use qbestd::features::{write_features, QuerySegmentPair, Split};
use qbestd::model::{
    load_checkpoint, score_pair, Detector, DetectorQuery, EncodingCache, ModelConfig, ModelParams, Pooling,
    SegmentInput,
};
use qbestd::tensor::AdamConfig;
use qbestd::train::{train, TrainConfig, TrainMode, TrainOptions};

use crate::args::*;
use crate::config::RunConfig;
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, &text)
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn split(s: SplitArg) -> Split {
    match s {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    }
}

fn detector(d: DetectorArg) -> Detector {
    match d {
        DetectorArg::Cos => Detector::Cos,
        DetectorArg::Nn => Detector::Nn,
        DetectorArg::NnCos => Detector::NnCos,
    }
}

/// Loads a checkpoint and checks it against the dataset's feature layout.
fn load_model(path: &Path, ds: &Dataset) -> Result<ModelParams<f64>> {
    require_file(path, "checkpoint")?;
    let (params, _) = load_checkpoint(path)?;
    if params.config.feature_dim != ds.feature_dim() {
        return Err(qbestd::Error::Validation(format!(
            "checkpoint expects {}-dim features but the manifest has {}",
            params.config.feature_dim,
            ds.feature_dim()
        ))
        .into());
    }
    Ok(params)
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    require_file(path, "manifest")?;
    Ok(Dataset::load(path)?)
}

pub fn generate(args: &GenerateArgs, rc: &RunConfig) -> Result<()> {
    let mut cfg = SynthConfig { seed: args.seed, ..SynthConfig::default() };
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = args.$field { cfg.$field = v; })* };
    }
    set!(keywords, pairs_per_keyword, test_pairs_per_keyword, holdout_keywords, queries_per_keyword,
         test_queries_per_keyword, feature_dim, nuisance_dims, noise, frame_period);
    if let Some(v) = args.segment_min {
        cfg.segment_frames.0 = v;
    }
    if let Some(v) = args.segment_max {
        cfg.segment_frames.1 = v;
    }
    cfg.validate()?;
    let mut data = generate_synthetic_dataset(&cfg)?;
    data.manifest.run_config = Some(rc.value());
    data.write(&args.out)?;
    eprintln!(
        "wrote {} queries, {} segments, {} pairs to {}",
        data.manifest.queries.len(),
        data.manifest.segments.len(),
        data.manifest.pairs.len(),
        args.out.display()
    );
    Ok(())
}

pub fn featurize(args: &FeaturizeArgs, rc: &RunConfig) -> Result<()> {
    for w in &args.wavs {
        require_file(w, "WAV file")?;
    }
    let written: Vec<serde_json::Value> = args
        .wavs
        .par_iter()
        .map(|w| {
            let audio = read_wav(w)?;
            let mut seq = extract_mfcc(&audio.samples, audio.sample_rate)?;
            let stem = w.file_stem().map_or_else(|| "audio".into(), |s| s.to_string_lossy().into_owned());
            seq.set_id(stem.clone());
            let out = args.out_dir.join(format!("{stem}.qbef"));
            fs::create_dir_all(&args.out_dir).map_err(|e| CliError::io(&args.out_dir, e))?;
            write_features(&seq, &out)?;
            Ok(json!({"wav": w, "features": out, "frames": seq.len(), "dim": seq.dim()}))
        })
        .collect::<Result<_>>()?;
    write_json(&args.out_dir.join("featurize.json"), &json!({"run_config": rc.value(), "files": written}))
}

pub fn teacher(args: &TeacherArgs, rc: &RunConfig) -> Result<()> {
    let mut ds = load_dataset(&args.manifest)?;
    let cfg = DtwConfig {
        frame_distance: match args.distance {
            Distance::Cosine => FrameDistance::OneMinusCosine,
            Distance::Euclidean => FrameDistance::Euclidean,
        },
        ..DtwConfig::default()
    };
    if let Some(path) = &args.results {
        let rows = ds
            .manifest
            .pairs
            .par_iter()
            .map(|p| Ok(dtw_score(ds.sequence(&p.query_id)?, ds.sequence(&p.segment_id)?, &cfg)?))
            .collect::<Result<Vec<_>>>()?;
        let csv = results_csv(
            ds.manifest.pairs.iter().zip(&rows).map(|(p, r)| (p.query_id.as_str(), p.segment_id.as_str(), r)),
        );
        write(path, &(rc.csv_comment() + &csv))?;
    }
    annotate_teacher_scores(&mut ds, &cfg)?;
    let mut manifest = ds.manifest;
    let from = base_dir(&args.manifest);
    if absolute(&from) != absolute(&base_dir(&args.out)) {
        let from = absolute(&from);
        for r in manifest.queries.iter_mut().chain(manifest.segments.iter_mut()) {
            r.path = from.join(&r.path).to_string_lossy().into_owned();
        }
    }
    manifest.run_config = Some(rc.value());
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    manifest.save(&args.out)?;
    Ok(())
}

fn absolute(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

pub fn train_cmd(args: &TrainArgs, rc: &RunConfig) -> Result<()> {
    let ds = load_dataset(&args.manifest)?;
    let det = detector(args.detector);
    let mut model = if args.reference {
        ModelConfig::reference(ds.feature_dim(), args.hops, det)
    } else {
        ModelConfig::desk(ds.feature_dim(), args.hops, det)
    };
    if let Some(h) = args.hidden {
        model.hidden_dim = h;
    }
    if let Some(l) = args.layers {
        model.lstm_layers = l;
    }
    if let Some(w) = &args.detector_widths {
        model.detector_widths = w.clone();
    }
    model.pooling = match args.pooling {
        PoolingArg::Attention => Pooling::Attention,
        PoolingArg::LastFrame => Pooling::LastFrame,
    };
    model.detector_query = match args.detector_query {
        DetectorQueryArg::Original => DetectorQuery::Original,
        DetectorQueryArg::LastHop => DetectorQuery::LastHop,
    };
    let mode = match args.mode {
        Mode::Supervised => TrainMode::Supervised,
        Mode::Distill => TrainMode::Distill,
    };
    let cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch,
        seed: args.seed,
        adam: AdamConfig { lr: args.lr, ..AdamConfig::default() },
        patience: args.patience,
        val_fraction: args.val_fraction,
        ..TrainConfig::new(mode, model)
    };
    let progress = |e: &qbestd::train::EpochReport| eprintln!("{}", e.progress_line());
    let outcome = train(
        &ds,
        &cfg,
        TrainOptions {
            checkpoint: Some(args.out.clone()),
            run_config: Some(rc.value()),
            on_epoch: Some(&progress),
            init: None,
        },
    )?;
    for n in &outcome.report.notices {
        eprintln!("note: {n}");
    }
    let report_path = args.report.clone().unwrap_or_else(|| args.out.with_extension("report.json"));
    write_json(
        &report_path,
        &json!({"run_config": rc.value(), "train_config": cfg, "report": outcome.report}),
    )
}

/// Items to score: every query against every segment of the split, or the
/// listed pairs with their labels.
fn search_items(ds: &Dataset, split: Split, listed: bool) -> Vec<SearchItem> {
    if listed {
        ds.pairs(split)
            .into_iter()
            .map(|p| SearchItem { query_id: p.query_id.clone(), segment_id: p.segment_id.clone(), relevant: p.label })
            .collect()
    } else {
        ds.search_grid(split)
    }
}

fn as_pairs(items: &[SearchItem]) -> Vec<QuerySegmentPair> {
    items
        .iter()
        .map(|i| QuerySegmentPair {
            query_id: i.query_id.clone(),
            segment_id: i.segment_id.clone(),
            label: i.relevant,
            teacher_score: None,
            span: None,
            split: Split::Test,
        })
        .collect()
}

fn rank(items: &[SearchItem], scores: &[f64]) -> Result<Vec<ScoredRanking>> {
    Ok(rankings_from_scores(
        items.iter().zip(scores).map(|(i, &s)| (i.query_id.as_str(), i.segment_id.as_str(), s, i.relevant)),
    )?)
}

pub fn search(args: &SearchArgs, rc: &RunConfig) -> Result<()> {
    if let Some(w) = args.fuse_dtw {
        if !(0.0..=1.0).contains(&w) {
            return Err(CliError::Usage(format!("--fuse-dtw must lie in [0, 1], got {w}")));
        }
    }
    let ds = load_dataset(&args.manifest)?;
    let params = load_model(&args.checkpoint, &ds)?;
    let items = search_items(&ds, split(args.split), args.listed_pairs);
    if items.is_empty() {
        return Err(qbestd::Error::InsufficientData("nothing to search in this split".into()).into());
    }
    let scores: Vec<f64> = if args.no_cache {
        items
            .par_iter()
            .map(|i| {
                let (conf, _) = score_pair(
                    &params,
                    ds.sequence(&i.query_id)?,
                    SegmentInput::Raw(ds.sequence(&i.segment_id)?),
                )?;
                Ok(conf.score)
            })
            .collect::<Result<_>>()?
    } else {
        let owned = as_pairs(&items);
        let pairs: Vec<&QuerySegmentPair> = owned.iter().collect();
        score_pairs_model(&params, &ds, &pairs, &EncodingCache::new())?
    };
    let mut rankings = rank(&items, &scores)?;
    if let Some(w) = args.fuse_dtw {
        let owned = as_pairs(&items);
        let pairs: Vec<&QuerySegmentPair> = owned.iter().collect();
        let dtw = rank(&items, &score_pairs_dtw(&ds, &pairs, &DtwConfig::default())?)?;
        rankings = dtw
            .iter()
            .zip(&rankings)
            .map(|(d, m)| fuse_scores(d, m, w, 1.0 - w))
            .collect::<qbestd::Result<_>>()?;
    }
    write(&args.out, &(rc.csv_comment() + &rankings_csv(&rankings)))
}

#[derive(serde::Deserialize)]
struct RankingRow {
    query_id: String,
    #[allow(dead_code)]
    rank: usize,
    segment_id: String,
    score: f64,
    relevant: Option<String>,
}

/// Reads a rankings CSV, skipping `#` comment lines.
pub fn read_rankings(path: &Path) -> Result<Vec<ScoredRanking>> {
    require_file(path, "rankings file")?;
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let mut rows = Vec::new();
    for r in reader.deserialize() {
        let r: RankingRow = r?;
        let relevant = match r.relevant.as_deref().map(str::trim) {
            None | Some("") => None,
            Some("1") | Some("true") => Some(true),
            Some("0") | Some("false") => Some(false),
            Some(other) => return Err(CliError::Usage(format!("bad relevance value {other:?} in {}", path.display()))),
        };
        rows.push((r.query_id, r.segment_id, r.score, relevant));
    }
    Ok(rankings_from_scores(rows)?)
}

fn map_json(report: &MapReport) -> serde_json::Value {
    let per_query: BTreeMap<&str, f64> = report.per_query.iter().map(|(q, ap)| (q.as_str(), *ap)).collect();
    json!({"map": report.map, "per_query": per_query, "excluded": report.excluded})
}

pub fn eval(args: &EvalArgs, rc: &RunConfig) -> Result<()> {
    let (source, report) = if let Some(path) = &args.rankings {
        ("rankings", mean_average_precision(&read_rankings(path)?)?)
    } else {
        let manifest = args
            .manifest
            .as_ref()
            .ok_or_else(|| CliError::Usage("eval needs --rankings, or --manifest with --checkpoint or --dtw".into()))?;
        let ds = load_dataset(manifest)?;
        let pairs = ds.pairs(split(args.split));
        if let Some(ck) = &args.checkpoint {
            let params = load_model(ck, &ds)?;
            ("model", pairs_map(&pairs, &score_pairs_model(&params, &ds, &pairs, &EncodingCache::new())?)?)
        } else if args.dtw {
            ("dtw", pairs_map(&pairs, &score_pairs_dtw(&ds, &pairs, &DtwConfig::default())?)?)
        } else {
            return Err(CliError::Usage("eval with --manifest needs --checkpoint or --dtw".into()));
        }
    };
    let mut out = map_json(&report);
    out["source"] = json!(source);
    out["run_config"] = rc.value();
    println!("MAP {:.6} over {} queries", report.map, report.per_query.len());
    if let Some(path) = &args.out {
        write_json(path, &out)?;
    }
    Ok(())
}

pub fn attention(args: &AttentionArgs, rc: &RunConfig) -> Result<()> {
    if !(args.bin_width > 0.0) || !(args.tolerance >= 0.0) {
        return Err(CliError::Usage("--bin-width must be positive and --tolerance non-negative".into()));
    }
    let ds = load_dataset(&args.manifest)?;
    let params = load_model(&args.checkpoint, &ds)?;
    let pairs = ds.pairs(split(args.split));
    let cache = EncodingCache::new();
    let traced = score_pairs_traced(&params, &ds, &pairs, &cache)?;
    let mut traces = rc.csv_comment() + "pair_id,hop,frame_index,alpha_raw,alpha_norm\n";
    for (p, (_, trace)) in pairs.iter().zip(&traced) {
        traces.push_str(&trace.csv_rows(&format!("{},", p.pair_id())));
    }
    write(&args.out_dir.join("attention.csv"), &traces)?;

    let records = attention_records(&params, &ds, &pairs, &cache)?;
    let mut summary = json!({"run_config": rc.value(), "pairs": pairs.len(), "localized_pairs": records.len()});
    if let Some(rep) = localize_attention(records, ds.frame_period(), args.bin_width, args.tolerance) {
        write(&args.out_dir.join("localization.csv"), &(rc.csv_comment() + &rep.records_csv()))?;
        write(&args.out_dir.join("histogram.csv"), &(rc.csv_comment() + &rep.histogram_csv()))?;
        summary["fraction_under_one_second"] = json!(rep.fraction_under_one_second);
        summary["fraction_inside"] = json!(rep.fraction_inside);
        summary["chance_rate"] = json!(rep.chance_rate);
        summary["tolerance_frames"] = json!(rep.tolerance_frames);
        eprintln!(
            "argmax inside span: {:.3} (chance {:.3}); within 1 s of span end: {:.3}",
            rep.fraction_inside, rep.chance_rate, rep.fraction_under_one_second
        );
    } else {
        eprintln!("no positive pairs with spans; localization skipped");
    }
    write_json(&args.out_dir.join("summary.json"), &summary)
}

pub fn bench(args: &BenchArgs, rc: &RunConfig) -> Result<()> {
    let params = match &args.checkpoint {
        Some(ck) => {
            require_file(ck, "checkpoint")?;
            load_checkpoint(ck)?.0
        }
        None => {
            let cfg = if args.reference {
                ModelConfig::reference(args.feature_dim, args.hops, Detector::Nn)
            } else {
                ModelConfig::desk(args.feature_dim, args.hops, Detector::Nn)
            };
            ModelParams::init(&cfg, args.seed)?
        }
    };
    let cfg = BenchConfig {
        m_values: args.m_values.clone(),
        n_values: args.n_values.clone(),
        fixed_m: args.fixed_m,
        fixed_n: args.fixed_n,
        hops: args.hops,
        repetitions: args.repetitions,
        seed: args.seed,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot build benchmark thread pool: {e}")))?;
    let report = pool.install(|| benchmark_runtime(&params.cast::<f32>(), &DtwConfig::default(), &cfg))?;
    for f in &report.fits {
        eprintln!("{} time vs {}: exponent {:.3} +- {:.3}", f.method, f.axis, f.exponent, f.std_error);
    }
    write(&args.out, &(rc.csv_comment() + &report.csv()))
}
