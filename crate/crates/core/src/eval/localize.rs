use std::collections::BTreeMap;

use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalizationRecord {
    pub pair_id: String,
    /// Frame with the largest final-hop attention weight.
    pub argmax_frame: usize,
    /// Inclusive keyword span in segment frames.
    pub span: (usize, usize),
    pub segment_frames: usize,
    /// `(argmax_frame - span_end) * frame_period`.
    pub offset_seconds: f64,
}

impl LocalizationRecord {
    pub fn new(pair_id: impl Into<String>, argmax_frame: usize, span: (usize, usize), segment_frames: usize, frame_period: f64) -> Self {
        Self {
            pair_id: pair_id.into(),
            argmax_frame,
            span,
            segment_frames,
            offset_seconds: (argmax_frame as f64 - span.1 as f64) * frame_period,
        }
    }

    /// Whether the argmax lies within the span widened by `tolerance` frames.
    pub fn inside(&self, tolerance: usize) -> bool {
        let lo = self.span.0.saturating_sub(tolerance);
        (lo..=self.span.1 + tolerance).contains(&self.argmax_frame)
    }
}

/// Offset histogram with bins of `bin_width` seconds centred on multiples
/// of the width, so bin 0 covers `[-w/2, w/2)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub bin_width: f64,
    pub counts: BTreeMap<i64, usize>,
}

impl Histogram {
    pub fn new(bin_width: f64, values: impl IntoIterator<Item = f64>) -> Self {
        let mut counts = BTreeMap::new();
        for v in values {
            *counts.entry(Self::bin_of(bin_width, v)).or_insert(0) += 1;
        }
        Self { bin_width, counts }
    }

    pub fn bin_of(bin_width: f64, v: f64) -> i64 {
        (v / bin_width + 0.5).floor() as i64
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    /// `(lower edge, upper edge, count)` per non-empty bin.
    pub fn bins(&self) -> Vec<(f64, f64, usize)> {
        self.counts
            .iter()
            .map(|(&k, &c)| {
                let centre = k as f64 * self.bin_width;
                (centre - self.bin_width / 2.0, centre + self.bin_width / 2.0, c)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalizationReport {
    pub records: Vec<LocalizationRecord>,
    pub histogram: Histogram,
    pub fraction_under_one_second: f64,
    /// Fraction of argmax frames inside the span widened by the tolerance.
    pub fraction_inside: f64,
    /// Expected inside fraction for an argmax drawn uniformly per segment.
    pub chance_rate: f64,
    pub tolerance_frames: usize,
}

/// Probability that a uniformly random frame of the segment lands inside
/// the widened span.
pub fn chance_rate(span: (usize, usize), segment_frames: usize, tolerance: usize) -> f64 {
    let lo = span.0.saturating_sub(tolerance);
    let hi = (span.1 + tolerance).min(segment_frames.saturating_sub(1));
    if segment_frames == 0 || hi < lo {
        return 0.0;
    }
    (hi - lo + 1) as f64 / segment_frames as f64
}

/// Summarizes attention argmax positions. Returns `None` when there are no
/// records.
pub fn localize_attention(
    records: Vec<LocalizationRecord>,
    frame_period: f64,
    bin_width: f64,
    tolerance_seconds: f64,
) -> Option<LocalizationReport> {
    if records.is_empty() {
        return None;
    }
    let n = records.len() as f64;
    let tolerance = (tolerance_seconds / frame_period).round() as usize;
    let histogram = Histogram::new(bin_width, records.iter().map(|r| r.offset_seconds));
    let under = records.iter().filter(|r| r.offset_seconds.abs() < 1.0).count() as f64 / n;
    let inside = records.iter().filter(|r| r.inside(tolerance)).count() as f64 / n;
    let chance = records.iter().map(|r| chance_rate(r.span, r.segment_frames, tolerance)).sum::<f64>() / n;
    Some(LocalizationReport {
        records,
        histogram,
        fraction_under_one_second: under,
        fraction_inside: inside,
        chance_rate: chance,
        tolerance_frames: tolerance,
    })
}

impl LocalizationReport {
    /// CSV `pair_id,argmax_frame,span_start,span_end,offset_seconds`.
    pub fn records_csv(&self) -> String {
        let mut out = String::from("pair_id,argmax_frame,span_start,span_end,offset_seconds\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.pair_id, r.argmax_frame, r.span.0, r.span.1, r.offset_seconds
            ));
        }
        out
    }

    /// CSV `bin_start,bin_end,count`.
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("bin_start,bin_end,count\n");
        for (lo, hi, c) in self.histogram.bins() {
            out.push_str(&format!("{lo:.3},{hi:.3},{c}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn argmax_at_span_end_is_offset_zero() {
        let r = LocalizationRecord::new("p", 40, (30, 40), 100, 0.05);
        assert_eq!(r.offset_seconds, 0.0);
        let rep = localize_attention(vec![r], 0.05, 0.1, 0.5).unwrap();
        assert_eq!(rep.histogram.counts.get(&0), Some(&1));
        assert_eq!(rep.fraction_under_one_second, 1.0);
        assert_eq!(rep.fraction_inside, 1.0);
    }

    #[test]
    fn tolerance_widens_the_span() {
        let r = LocalizationRecord::new("p", 25, (30, 40), 100, 0.05);
        assert!(!r.inside(0));
        assert!(r.inside(5));
        assert!((r.offset_seconds + 0.75).abs() < 1e-12);
    }

    #[test]
    fn chance_rate_counts_widened_frames() {
        assert_eq!(chance_rate((30, 39), 100, 0), 0.1);
        assert_eq!(chance_rate((30, 39), 100, 10), 0.3);
        // Clipped at both segment ends.
        assert_eq!(chance_rate((2, 5), 10, 5), 1.0);
    }

    #[test]
    fn empty_input_gives_no_report() {
        assert!(localize_attention(vec![], 0.05, 0.1, 0.5).is_none());
    }

    #[test]
    fn bins_are_centred_on_zero() {
        assert_eq!(Histogram::bin_of(0.1, 0.0), 0);
        assert_eq!(Histogram::bin_of(0.1, 0.049), 0);
        assert_eq!(Histogram::bin_of(0.1, -0.05), 0);
        assert_eq!(Histogram::bin_of(0.1, 0.05), 1);
        assert_eq!(Histogram::bin_of(0.1, -0.051), -1);
    }

    proptest! {
        #[test]
        fn histogram_partitions_offsets(values in prop::collection::vec(-20.0f64..20.0, 0..200), w in 0.01f64..1.0) {
            let h = Histogram::new(w, values.iter().copied());
            prop_assert_eq!(h.total(), values.len());
            for v in values {
                let k = Histogram::bin_of(w, v);
                prop_assert!(h.counts.contains_key(&k));
                let centre = k as f64 * w;
                prop_assert!(v >= centre - w / 2.0 - 1e-9 && v < centre + w / 2.0 + 1e-9);
            }
        }
    }
}
