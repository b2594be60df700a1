//! Cosine attention over frame encodings and the hop recurrence
//! `q_{k+1} = q_k + pooled_k`.

use super::Pooling;
use crate::error::{Error, Result};
use crate::tensor::ops::{cosine_backward, softmax, softmax_backward, ZERO_NORM};
use crate::tensor::{axpy, dot, Real};

/// Per-frame top-layer LSTM states of one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentEncoding<T = f64> {
    pub segment_id: String,
    /// `frames x dim`, row-major.
    pub hidden: Vec<T>,
    pub dim: usize,
    /// Euclidean norm of each row.
    pub norms: Vec<T>,
}

impl<T: Real> SegmentEncoding<T> {
    pub fn new(segment_id: impl Into<String>, hidden: Vec<T>, dim: usize) -> Self {
        let norms = hidden.chunks_exact(dim).map(|r| dot(r, r).sqrt()).collect();
        Self {
            segment_id: segment_id.into(),
            hidden,
            dim,
            norms,
        }
    }

    pub fn frames(&self) -> usize {
        self.norms.len()
    }

    pub fn row(&self, t: usize) -> &[T] {
        &self.hidden[t * self.dim..(t + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HopTrace<T = f64> {
    /// Cosine score of each frame against this hop's query vector.
    pub raw: Vec<T>,
    /// Softmax of `raw`.
    pub weights: Vec<T>,
    pub pooled: Vec<T>,
    /// The query vector this hop attended with.
    pub query: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace<T = f64> {
    pub hops: Vec<HopTrace<T>>,
}

impl<T: Real> AttentionTrace<T> {
    pub fn last(&self) -> &HopTrace<T> {
        self.hops.last().expect("trace has at least one hop")
    }

    /// Frame with the largest final-hop attention weight (first on ties).
    pub fn argmax_frame(&self) -> usize {
        let w = &self.last().weights;
        (0..w.len()).fold(0, |best, t| if w[t] > w[best] { t } else { best })
    }

    /// CSV rows `hop,frame_index,alpha_raw,alpha_norm` with 1-based hops.
    pub fn csv_rows(&self, prefix: &str) -> String {
        let mut out = String::new();
        for (k, hop) in self.hops.iter().enumerate() {
            for (t, (r, w)) in hop.raw.iter().zip(&hop.weights).enumerate() {
                out.push_str(&format!("{prefix}{},{t},{},{}\n", k + 1, r.as_f64(), w.as_f64()));
            }
        }
        out
    }
}

fn cosine_with_norm<T: Real>(row: &[T], row_norm: T, q: &[T], q_norm: T) -> T {
    let eps = T::of_f64(ZERO_NORM);
    if row_norm < eps || q_norm < eps {
        return T::zero();
    }
    (dot(row, q) / (row_norm * q_norm)).max(-T::one()).min(T::one())
}

fn check_dims<T: Real>(query: &[T], enc: &SegmentEncoding<T>) -> Result<()> {
    if query.len() != enc.dim {
        return Err(Error::Validation(format!(
            "query vector has dim {}, segment encoding {}",
            query.len(),
            enc.dim
        )));
    }
    if enc.frames() == 0 {
        return Err(Error::Validation("segment encoding has no frames".into()));
    }
    Ok(())
}

fn hop<T: Real>(query: &[T], enc: &SegmentEncoding<T>, pooling: Pooling) -> HopTrace<T> {
    let q_norm = dot(query, query).sqrt();
    let raw: Vec<T> = (0..enc.frames())
        .map(|t| cosine_with_norm(enc.row(t), enc.norms[t], query, q_norm))
        .collect();
    let (weights, pooled) = match pooling {
        Pooling::Attention => {
            let weights = softmax(&raw);
            let mut pooled = vec![T::zero(); enc.dim];
            for (t, &w) in weights.iter().enumerate() {
                axpy(w, enc.row(t), &mut pooled);
            }
            (weights, pooled)
        }
        Pooling::LastFrame => {
            let last = enc.frames() - 1;
            let mut weights = vec![T::zero(); enc.frames()];
            weights[last] = T::one();
            (weights, enc.row(last).to_vec())
        }
    };
    HopTrace {
        raw,
        weights,
        pooled,
        query: query.to_vec(),
    }
}

/// One attention pass: returns the normalized weights and pooled vector.
pub fn attend<T: Real>(query: &[T], enc: &SegmentEncoding<T>) -> Result<(Vec<T>, Vec<T>)> {
    check_dims(query, enc)?;
    let h = hop(query, enc, Pooling::Attention);
    Ok((h.weights, h.pooled))
}

/// Runs `hops` rounds of attention starting from `query`.
pub fn run_hops<T: Real>(query: &[T], enc: &SegmentEncoding<T>, hops: usize) -> Result<AttentionTrace<T>> {
    run_hops_pooled(query, enc, hops, Pooling::Attention)
}

pub(crate) fn run_hops_pooled<T: Real>(
    query: &[T],
    enc: &SegmentEncoding<T>,
    hops: usize,
    pooling: Pooling,
) -> Result<AttentionTrace<T>> {
    if !(1..=super::MAX_HOPS).contains(&hops) {
        return Err(Error::Config(format!("hops must be in 1..={}, got {hops}", super::MAX_HOPS)));
    }
    check_dims(query, enc)?;
    let mut trace = AttentionTrace {
        hops: Vec::with_capacity(hops),
    };
    let mut q = query.to_vec();
    for k in 0..hops {
        let h = hop(&q, enc, pooling);
        if k + 1 < hops {
            for (qi, &p) in q.iter_mut().zip(&h.pooled) {
                *qi += p;
            }
        }
        trace.hops.push(h);
    }
    Ok(trace)
}

/// Gradients of the hop chain. `d_pooled` is the gradient on the last
/// pooled vector and `d_last_query` an optional gradient on the last hop's
/// query vector. Returns `(d_frames, d_first_query)`.
pub(crate) fn hops_backward(
    enc: &SegmentEncoding<f64>,
    trace: &AttentionTrace<f64>,
    pooling: Pooling,
    d_pooled: &[f64],
    d_last_query: Option<&[f64]>,
) -> (Vec<f64>, Vec<f64>) {
    let h = enc.dim;
    let frames = enc.frames();
    let mut d_frames = vec![0.0; frames * h];
    let mut d_next = vec![0.0; h];
    let n = trace.hops.len();
    for (k, hop) in trace.hops.iter().enumerate().rev() {
        let mut d_pool = d_next.clone();
        let mut d_query = d_next;
        if k + 1 == n {
            axpy(1.0, d_pooled, &mut d_pool);
            if let Some(dq) = d_last_query {
                axpy(1.0, dq, &mut d_query);
            }
        }
        match pooling {
            Pooling::Attention => {
                let d_weights: Vec<f64> = (0..frames).map(|t| dot(&d_pool, enc.row(t))).collect();
                for (t, &w) in hop.weights.iter().enumerate() {
                    axpy(w, &d_pool, &mut d_frames[t * h..(t + 1) * h]);
                }
                let d_raw = softmax_backward(&hop.weights, &d_weights);
                let q_norm = dot(&hop.query, &hop.query).sqrt();
                for t in 0..frames {
                    let row = enc.row(t);
                    cosine_backward(
                        row,
                        &hop.query,
                        (hop.raw[t], enc.norms[t], q_norm),
                        d_raw[t],
                        &mut d_frames[t * h..(t + 1) * h],
                        &mut d_query,
                    );
                }
            }
            Pooling::LastFrame => {
                axpy(1.0, &d_pool, &mut d_frames[(frames - 1) * h..]);
            }
        }
        d_next = d_query;
    }
    (d_frames, d_next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::cosine_similarity;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn enc(rows: &[&[f64]]) -> SegmentEncoding<f64> {
        SegmentEncoding::new("s", rows.concat(), rows[0].len())
    }

    fn random_enc(rng: &mut ChaCha8Rng, frames: usize, dim: usize) -> SegmentEncoding<f64> {
        SegmentEncoding::new("s", (0..frames * dim).map(|_| rng.gen_range(-1.0..1.0)).collect(), dim)
    }

    #[test]
    fn single_frame_gets_all_weight() {
        let e = enc(&[&[0.3, -0.4]]);
        let (w, v) = attend(&[1.0, 2.0], &e).unwrap();
        assert_eq!(w, vec![1.0]);
        assert_eq!(v, vec![0.3, -0.4]);
    }

    #[test]
    fn identical_frames_get_uniform_weight() {
        let e = enc(&[&[0.5, 1.0], &[0.5, 1.0], &[0.5, 1.0], &[0.5, 1.0]]);
        let (w, v) = attend(&[-1.0, 0.2], &e).unwrap();
        assert!(w.iter().all(|x| (x - 0.25).abs() < 1e-15));
        assert!((v[0] - 0.5).abs() < 1e-15 && (v[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn three_frame_hand_computation() {
        // S = [1,0], [0,1], [1,1]; q = [1,0]
        // cos = [1, 0, 1/sqrt(2)]
        // softmax = exp(cos) / (e + 1 + e^{0.7071...})
        let e = enc(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let (w, v) = attend(&[1.0, 0.0], &e).unwrap();
        let c2 = std::f64::consts::FRAC_1_SQRT_2;
        let z = 1f64.exp() + 1.0 + c2.exp();
        let expected = [1f64.exp() / z, 1.0 / z, c2.exp() / z];
        for (a, b) in w.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        // V_S = w0 [1,0] + w1 [0,1] + w2 [1,1]
        assert!((v[0] - (expected[0] + expected[2])).abs() < 1e-15);
        assert!((v[1] - (expected[1] + expected[2])).abs() < 1e-15);
    }

    #[test]
    fn hop_sum_definition() {
        // Frames chosen so the first pooled vector is exactly [3, 4].
        let e = enc(&[&[3.0, 4.0]]);
        let trace = run_hops(&[1.0, 2.0], &e, 2).unwrap();
        assert_eq!(trace.hops[0].pooled, vec![3.0, 4.0]);
        assert_eq!(trace.hops[1].query, vec![4.0, 6.0]);
    }

    #[test]
    fn one_hop_equals_attend() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = random_enc(&mut rng, 9, 4);
        let q: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let trace = run_hops(&q, &e, 1).unwrap();
        let (w, v) = attend(&q, &e).unwrap();
        assert_eq!(trace.hops[0].weights, w);
        assert_eq!(trace.hops[0].pooled, v);
        assert!(run_hops(&q, &e, 0).is_err());
        assert!(run_hops(&q, &e, 9).is_err());
    }

    #[test]
    fn three_hops_match_step_by_step_reevaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = random_enc(&mut rng, 12, 5);
        let q: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let trace = run_hops(&q, &e, 3).unwrap();
        // Independent loop using the generic cosine and softmax definitions.
        let mut query = q.clone();
        for hop in &trace.hops {
            let scores: Vec<f64> = (0..12).map(|t| cosine_similarity(e.row(t), &query)).collect();
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            let weights: Vec<f64> = exps.iter().map(|x| x / z).collect();
            let mut pooled = vec![0.0; 5];
            for t in 0..12 {
                for k in 0..5 {
                    pooled[k] += weights[t] * e.row(t)[k];
                }
            }
            for (a, b) in hop.weights.iter().zip(&weights) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in hop.pooled.iter().zip(&pooled) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in hop.query.iter().zip(&query) {
                assert!((a - b).abs() < 1e-12);
            }
            for k in 0..5 {
                query[k] += pooled[k];
            }
        }
    }

    proptest! {
        #[test]
        fn weights_normalize_and_ignore_query_scale(seed in any::<u64>(), frames in 1usize..30, c in prop::sample::select(vec![0.1, 10.0, 3.7])) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = random_enc(&mut rng, frames, 6);
            let q: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let scaled: Vec<f64> = q.iter().map(|v| v * c).collect();
            let (w, v) = attend(&q, &e).unwrap();
            let (ws, vs) = attend(&scaled, &e).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(w.iter().all(|&x| x > 0.0));
            for (a, b) in w.iter().zip(&ws) { prop_assert!((a - b).abs() < 1e-9); }
            for (a, b) in v.iter().zip(&vs) { prop_assert!((a - b).abs() < 1e-9); }
        }

        #[test]
        fn permuting_frames_permutes_weights(seed in any::<u64>(), frames in 2usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = random_enc(&mut rng, frames, 4);
            let q: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut order: Vec<usize> = (0..frames).collect();
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng);
            let rows: Vec<f64> = order.iter().flat_map(|&t| e.row(t).to_vec()).collect();
            let permuted = SegmentEncoding::new("p", rows, 4);
            let (w, v) = attend(&q, &e).unwrap();
            let (wp, vp) = attend(&q, &permuted).unwrap();
            for (i, &t) in order.iter().enumerate() {
                prop_assert!((wp[i] - w[t]).abs() < 1e-12);
            }
            for (a, b) in v.iter().zip(&vp) { prop_assert!((a - b).abs() < 1e-12); }
        }
    }
}
