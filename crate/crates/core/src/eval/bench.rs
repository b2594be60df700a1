use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::dtw::{dtw_score, DtwConfig};
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::model::{encode_query, encode_segment, score_encoded, score_pair, ModelParams, SegmentInput};

pub const DTW: &str = "dtw";
pub const NETWORK: &str = "network";
pub const NETWORK_CACHED: &str = "network_cached";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchConfig {
    /// Segment lengths timed at `fixed_n`.
    pub m_values: Vec<usize>,
    /// Query lengths timed at `fixed_m`.
    pub n_values: Vec<usize>,
    pub fixed_m: usize,
    pub fixed_n: usize,
    pub hops: usize,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            m_values: vec![500, 1000, 2000, 4000],
            n_values: vec![25, 50, 100, 200],
            fixed_m: 4000,
            fixed_n: 100,
            hops: 3,
            repetitions: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub method: &'static str,
    pub m: usize,
    pub n: usize,
    pub hops: usize,
    pub median_seconds: f64,
}

/// Least-squares slope of `ln t` against `ln x` with its standard error.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExponentFit {
    pub method: &'static str,
    /// `"M"` or `"N"`: the varied size.
    pub axis: &'static str,
    /// The size held fixed.
    pub fixed: usize,
    pub exponent: f64,
    pub std_error: f64,
}

impl ExponentFit {
    /// True when the slope is within two standard errors of zero or below
    /// `floor` in magnitude.
    pub fn indistinguishable_from_zero(&self, floor: f64) -> bool {
        self.exponent.abs() <= 2.0 * self.std_error || self.exponent.abs() < floor
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub fits: Vec<ExponentFit>,
    pub feature_dim: usize,
    pub repetitions: usize,
    pub threads: usize,
}

impl BenchReport {
    pub fn median(&self, method: &str, m: usize, n: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.m == m && r.n == n)
            .map(|r| r.median_seconds)
    }

    pub fn fit(&self, method: &str, axis: &str) -> Option<&ExponentFit> {
        self.fits.iter().find(|f| f.method == method && f.axis == axis)
    }

    /// CSV `method,M,N,hops,median_seconds,fitted_exponent_M,fitted_exponent_N`.
    /// Exponent columns are filled on rows that belong to the fitted sweep.
    pub fn csv(&self) -> String {
        let mut out = String::from("method,M,N,hops,median_seconds,fitted_exponent_M,fitted_exponent_N\n");
        for r in &self.rows {
            let col = |axis: &str, fixed: usize| {
                self.fits
                    .iter()
                    .find(|f| f.method == r.method && f.axis == axis && f.fixed == fixed)
                    .map(|f| format!("{:.4}", f.exponent))
                    .unwrap_or_default()
            };
            out.push_str(&format!(
                "{},{},{},{},{:.9},{},{}\n",
                r.method,
                r.m,
                r.n,
                r.hops,
                r.median_seconds,
                col("M", r.n),
                col("N", r.m)
            ));
        }
        out
    }
}

/// Slope and standard error of the least-squares line through `(x, y)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    if x.len() < 3 {
        return (slope, f64::NAN);
    }
    let ssr: f64 = x.iter().zip(y).map(|(a, b)| (b - my - slope * (a - mx)).powi(2)).sum();
    (slope, (ssr / (n - 2.0) / sxx).sqrt())
}

fn random_sequence(rng: &mut ChaCha8Rng, id: &str, frames: usize, dim: usize) -> Result<FeatureSequence> {
    let v = (0..frames * dim).map(|_| StandardNormal.sample(rng)).collect();
    FeatureSequence::new(id, v, dim, 0.01)
}

fn median_time(repetitions: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    f()?;
    let mut times = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        f()?;
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    Ok(if times.len() % 2 == 1 {
        times[mid]
    } else {
        (times[mid - 1] + times[mid]) / 2.0
    })
}

/// Times DTW and the network on random features. Every timed call runs on
/// the calling thread.
pub fn benchmark_runtime(params: &ModelParams<f32>, dtw_cfg: &DtwConfig, cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.repetitions < 3 {
        return Err(Error::Config("benchmark needs at least 3 repetitions".into()));
    }
    if cfg.m_values.iter().chain(&cfg.n_values).any(|&v| v == 0) || cfg.fixed_m == 0 || cfg.fixed_n == 0 {
        return Err(Error::Config("benchmark sizes must be positive".into()));
    }
    let mut model = params.clone();
    model.config.hops = cfg.hops;
    model.config.validate()?;
    let dim = model.config.feature_dim;

    let mut points: Vec<(usize, usize)> = cfg.m_values.iter().map(|&m| (m, cfg.fixed_n)).collect();
    points.extend(cfg.n_values.iter().map(|&n| (cfg.fixed_m, n)));
    points.sort_unstable();
    points.dedup();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();
    for &(m, n) in &points {
        let segment = random_sequence(&mut rng, "segment", m, dim)?;
        let query = random_sequence(&mut rng, "query", n, dim)?;
        let t = median_time(cfg.repetitions, || dtw_score(&query, &segment, dtw_cfg).map(|_| ()))?;
        rows.push(BenchRow { method: DTW, m, n, hops: cfg.hops, median_seconds: t });
        let t = median_time(cfg.repetitions, || {
            score_pair(&model, &query, SegmentInput::Raw(&segment)).map(|_| ())
        })?;
        rows.push(BenchRow { method: NETWORK, m, n, hops: cfg.hops, median_seconds: t });
        let vq = encode_query(&model, &query)?;
        let enc = encode_segment(&model, &segment)?;
        let t = median_time(cfg.repetitions, || score_encoded(&model, &vq, &enc).map(|_| ()))?;
        rows.push(BenchRow { method: NETWORK_CACHED, m, n, hops: cfg.hops, median_seconds: t });
    }

    let mut fits = Vec::new();
    for method in [DTW, NETWORK, NETWORK_CACHED] {
        for (axis, fixed, values) in [("M", cfg.fixed_n, &cfg.m_values), ("N", cfg.fixed_m, &cfg.n_values)] {
            if values.len() < 2 {
                continue;
            }
            let (mut xs, mut ys) = (Vec::new(), Vec::new());
            for &v in values {
                let (m, n) = if axis == "M" { (v, fixed) } else { (fixed, v) };
                let t = rows
                    .iter()
                    .find(|r| r.method == method && r.m == m && r.n == n)
                    .map(|r| r.median_seconds)
                    .expect("every sweep point was timed");
                xs.push((v as f64).ln());
                ys.push(t.max(1e-12).ln());
            }
            let (exponent, std_error) = linear_fit(&xs, &ys);
            fits.push(ExponentFit { method, axis, fixed, exponent, std_error });
        }
    }
    Ok(BenchReport {
        rows,
        fits,
        feature_dim: dim,
        repetitions: cfg.repetitions,
        threads: 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Detector, ModelConfig};

    #[test]
    fn linear_fit_recovers_exact_line() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v - 1.0).collect();
        let (slope, se) = linear_fit(&x, &y);
        assert!((slope - 2.0).abs() < 1e-12);
        assert!(se < 1e-9);
    }

    #[test]
    fn zero_slope_detection() {
        let fit = ExponentFit { method: NETWORK_CACHED, axis: "N", fixed: 10, exponent: 0.05, std_error: 0.01 };
        assert!(fit.indistinguishable_from_zero(0.1));
        let fit = ExponentFit { exponent: 0.9, std_error: 0.05, ..fit };
        assert!(!fit.indistinguishable_from_zero(0.1));
    }

    #[test]
    fn small_benchmark_has_every_column() {
        let cfg = ModelConfig {
            feature_dim: 4,
            hidden_dim: 4,
            lstm_layers: 1,
            hops: 1,
            detector: Detector::Nn,
            detector_widths: vec![4, 2],
            detector_query: Default::default(),
            pooling: Default::default(),
        };
        let params = ModelParams::<f32>::init(&cfg, 0).unwrap();
        let bench = BenchConfig {
            m_values: vec![20, 40],
            n_values: vec![5, 10],
            fixed_m: 40,
            fixed_n: 5,
            hops: 2,
            repetitions: 3,
            seed: 1,
        };
        let report = benchmark_runtime(&params, &DtwConfig::default(), &bench).unwrap();
        assert_eq!(report.rows.len(), 3 * 3);
        assert_eq!(report.fits.len(), 6);
        let csv = report.csv();
        assert!(csv.starts_with("method,M,N,hops,median_seconds,fitted_exponent_M,fitted_exponent_N\n"));
        let dtw_row = csv.lines().find(|l| l.starts_with("dtw,40,5,")).unwrap();
        assert_eq!(dtw_row.split(',').filter(|c| !c.is_empty()).count(), 7);
        assert!(benchmark_runtime(&params, &DtwConfig::default(), &BenchConfig { repetitions: 2, ..bench }).is_err());
    }
}
