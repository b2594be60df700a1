//! Pair scoring, ranking metrics, score fusion, attention localization and
//! the runtime benchmark.

pub mod bench;
pub mod localize;
pub mod ranking;
pub mod retrieval;

pub use bench::{benchmark_runtime, BenchConfig, BenchReport, BenchRow, ExponentFit};
pub use localize::{chance_rate, localize_attention, Histogram, LocalizationRecord, LocalizationReport};
pub use ranking::{
    average_precision, fuse_scores, mean_average_precision, rankings_csv, rankings_from_scores, MapReport,
    RankedEntry, ScoredRanking,
};
pub use retrieval::{
    annotate_teacher_scores, attention_records, pairs_map, score_pairs_dtw, score_pairs_model, score_pairs_traced,
    TeacherScores,
};
