//! 39-dimensional MFCC features: 13 cepstra plus first and second order
//! regression deltas.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::FeatureSequence;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MfccConfig {
    pub window_seconds: f64,
    pub hop_seconds: f64,
    pub mel_filters: usize,
    pub cepstra: usize,
    pub pre_emphasis: f64,
    pub log_floor: f64,
    /// Half-width of the delta regression window, in frames.
    pub delta_window: usize,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            window_seconds: 0.025,
            hop_seconds: 0.010,
            mel_filters: 26,
            cepstra: 13,
            pre_emphasis: 0.97,
            log_floor: 1e-10,
            delta_window: 2,
        }
    }
}

pub const MIN_SAMPLE_RATE: u32 = 8000;

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Number of analysis frames for `samples` input samples.
pub fn frame_count(samples: usize, window: usize, hop: usize) -> usize {
    if samples < window {
        0
    } else {
        (samples - window) / hop + 1
    }
}

pub struct MfccExtractor {
    config: MfccConfig,
    sample_rate: u32,
    window: usize,
    hop: usize,
    fft_size: usize,
    hamming: Vec<f64>,
    /// `mel_filters` rows of `fft_size / 2 + 1` weights.
    filterbank: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl MfccExtractor {
    pub fn new(config: MfccConfig, sample_rate: u32) -> Result<Self> {
        if sample_rate < MIN_SAMPLE_RATE {
            return Err(Error::Config(format!(
                "sample rate {sample_rate} Hz is below {MIN_SAMPLE_RATE} Hz"
            )));
        }
        if config.cepstra > config.mel_filters || config.cepstra == 0 {
            return Err(Error::Config("cepstra must be in 1..=mel_filters".into()));
        }
        let sr = f64::from(sample_rate);
        let window = (config.window_seconds * sr).round() as usize;
        let hop = (config.hop_seconds * sr).round() as usize;
        if window == 0 || hop == 0 {
            return Err(Error::Config("window and hop must span at least one sample".into()));
        }
        let fft_size = window.next_power_of_two();
        let hamming = (0..window)
            .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (window - 1) as f64).cos())
            .collect();
        let filterbank = mel_filterbank(config.mel_filters, fft_size, sr);
        let fft = FftPlanner::new().plan_fft_forward(fft_size);
        Ok(Self {
            config,
            sample_rate,
            window,
            hop,
            fft_size,
            hamming,
            filterbank,
            fft,
        })
    }

    pub fn window_len(&self) -> usize {
        self.window
    }

    pub fn hop_len(&self) -> usize {
        self.hop
    }

    pub fn fft_size(&self) -> usize {
        self.fft_size
    }

    pub fn filterbank(&self) -> &[Vec<f64>] {
        &self.filterbank
    }

    /// Windowed power spectrum (`fft_size / 2 + 1` bins) of one pre-emphasized frame.
    pub fn power_spectrum(&self, frame: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = frame
            .iter()
            .zip(&self.hamming)
            .map(|(x, w)| Complex::new(x * w, 0.0))
            .collect();
        buf.resize(self.fft_size, Complex::new(0.0, 0.0));
        self.fft.process(&mut buf);
        buf[..self.fft_size / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
    }

    pub fn mel_energies(&self, power: &[f64]) -> Vec<f64> {
        self.filterbank
            .iter()
            .map(|f| f.iter().zip(power).map(|(w, p)| w * p).sum())
            .collect()
    }

    fn cepstra(&self, mel: &[f64]) -> Vec<f64> {
        let logs: Vec<f64> = mel.iter().map(|e| e.max(self.config.log_floor).ln()).collect();
        let m = logs.len() as f64;
        (0..self.config.cepstra)
            .map(|k| {
                let scale = if k == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
                scale
                    * logs
                        .iter()
                        .enumerate()
                        .map(|(n, l)| {
                            l * (std::f64::consts::PI * k as f64 * (n as f64 + 0.5) / m).cos()
                        })
                        .sum::<f64>()
            })
            .collect()
    }

    pub fn extract(&self, samples: &[f64]) -> Result<FeatureSequence> {
        let frames = frame_count(samples.len(), self.window, self.hop);
        if frames == 0 {
            return Err(Error::InsufficientData(format!(
                "{} samples is shorter than one {}-sample window",
                samples.len(),
                self.window
            )));
        }
        let mut emphasized = Vec::with_capacity(samples.len());
        emphasized.push(samples[0]);
        emphasized.extend(samples.windows(2).map(|w| w[1] - self.config.pre_emphasis * w[0]));

        let ceps: Vec<Vec<f64>> = (0..frames)
            .map(|t| {
                let start = t * self.hop;
                let power = self.power_spectrum(&emphasized[start..start + self.window]);
                self.cepstra(&self.mel_energies(&power))
            })
            .collect();
        let delta = deltas(&ceps, self.config.delta_window);
        let delta2 = deltas(&delta, self.config.delta_window);
        let mut out = Vec::with_capacity(frames * 3 * self.config.cepstra);
        for t in 0..frames {
            for v in ceps[t].iter().chain(&delta[t]).chain(&delta2[t]) {
                out.push(*v as f32);
            }
        }
        FeatureSequence::new(
            "mfcc",
            out,
            3 * self.config.cepstra,
            self.hop as f64 / f64::from(self.sample_rate),
        )
    }
}

fn mel_filterbank(filters: usize, fft_size: usize, sample_rate: f64) -> Vec<Vec<f64>> {
    let top = hz_to_mel(sample_rate / 2.0);
    let edges: Vec<f64> = (0..filters + 2)
        .map(|i| mel_to_hz(top * i as f64 / (filters + 1) as f64))
        .collect();
    let bins = fft_size / 2 + 1;
    (0..filters)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * sample_rate / fft_size as f64;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// Regression deltas over `±window` frames with edge replication.
pub fn deltas(rows: &[Vec<f64>], window: usize) -> Vec<Vec<f64>> {
    let last = rows.len() as isize - 1;
    let norm = 2.0 * (1..=window).map(|n| (n * n) as f64).sum::<f64>();
    let at = |t: isize| &rows[t.clamp(0, last) as usize];
    (0..rows.len())
        .map(|t| {
            let t = t as isize;
            (0..rows[0].len())
                .map(|k| {
                    (1..=window as isize)
                        .map(|n| n as f64 * (at(t + n)[k] - at(t - n)[k]))
                        .sum::<f64>()
                        / norm
                })
                .collect()
        })
        .collect()
}

/// MFCCs with the default 25 ms / 10 ms recipe.
pub fn extract_mfcc(samples: &[f64], sample_rate: u32) -> Result<FeatureSequence> {
    MfccExtractor::new(MfccConfig::default(), sample_rate)?.extract(samples)
}
