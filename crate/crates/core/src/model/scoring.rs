//! Query and segment encoding, detection, and the per-pair training loss.

use super::attention::{hops_backward, run_hops_pooled, AttentionTrace, SegmentEncoding};
use super::{Detector, DetectorQuery, ModelParams};
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::tensor::lstm::{lstm_encode, stack_backward, stack_forward};
use crate::tensor::ops::{cosine_backward, cosine_parts, cross_entropy_grad, cross_entropy_loss, mse_grad, mse_loss, softmax};
use crate::tensor::ops::POSITIVE;
use crate::tensor::Real;

const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Confidence {
    /// Cosine for the `cos` detector, positive-class probability otherwise.
    pub score: f64,
    pub logits: Option<[f64; 2]>,
}

impl Confidence {
    /// The score mapped into `[0, 1]`, the quantity regressed in distillation.
    pub fn prediction(&self, detector: Detector) -> f64 {
        match detector {
            Detector::Cos => (1.0 + self.score) / 2.0,
            Detector::Nn | Detector::NnCos => self.score,
        }
    }
}

/// Training target for one pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Label(bool),
    /// Teacher score in `[0, 1]`.
    Score(f64),
}

pub enum SegmentInput<'a, T = f64> {
    Raw(&'a FeatureSequence),
    Encoded(&'a SegmentEncoding<T>),
}

fn rows_of<T: Real>(params: &ModelParams<T>, seq: &FeatureSequence) -> Result<Vec<T>> {
    if seq.dim() != params.config.feature_dim {
        return Err(Error::Validation(format!(
            "sequence {} has dim {}, model expects {}",
            seq.id(),
            seq.dim(),
            params.config.feature_dim
        )));
    }
    Ok(seq.as_slice().iter().map(|&v| T::of_f32(v)).collect())
}

/// Last top-layer LSTM state of the query.
pub fn encode_query<T: Real>(params: &ModelParams<T>, query: &FeatureSequence) -> Result<Vec<T>> {
    let rows = rows_of(params, query)?;
    Ok(lstm_encode(&params.lstm, &rows, query.len())?.0)
}

/// Top-layer LSTM state of every segment frame.
pub fn encode_segment<T: Real>(params: &ModelParams<T>, segment: &FeatureSequence) -> Result<SegmentEncoding<T>> {
    let rows = rows_of(params, segment)?;
    let (_, all) = lstm_encode(&params.lstm, &rows, segment.len())?;
    Ok(SegmentEncoding::new(segment.id(), all, params.config.hidden_dim))
}

/// Applies the detector head to a query vector and a pooled segment vector.
pub fn detect<T: Real>(params: &ModelParams<T>, query: &[T], pooled: &[T]) -> Result<Confidence> {
    let h = params.config.hidden_dim;
    if query.len() != h || pooled.len() != h {
        return Err(Error::Validation(format!(
            "detector expects vectors of dim {h}, got {} and {}",
            query.len(),
            pooled.len()
        )));
    }
    let (c, _, _) = cosine_parts(query, pooled);
    match (params.config.detector, &params.detector) {
        (Detector::Cos, _) => Ok(Confidence {
            score: c.as_f64(),
            logits: None,
        }),
        (det, Some(ff)) => {
            let mut x = Vec::with_capacity(ff.input_dim());
            x.extend_from_slice(query);
            x.extend_from_slice(pooled);
            if det == Detector::NnCos {
                x.push(c);
            }
            let logits = ff.forward(&x)?;
            let p = softmax(&logits);
            Ok(Confidence {
                score: p[POSITIVE].as_f64(),
                logits: Some([logits[0].as_f64(), logits[1].as_f64()]),
            })
        }
        (_, None) => Err(Error::Validation("network detector has no parameters".into())),
    }
}

/// Attends with a precomputed query vector over a precomputed encoding.
pub fn score_encoded<T: Real>(
    params: &ModelParams<T>,
    query: &[T],
    enc: &SegmentEncoding<T>,
) -> Result<(Confidence, AttentionTrace<T>)> {
    let cfg = &params.config;
    let trace = run_hops_pooled(query, enc, cfg.hops, cfg.pooling)?;
    let q = match cfg.detector_query {
        DetectorQuery::Original => query,
        DetectorQuery::LastHop => &trace.last().query,
    };
    let conf = detect(params, q, &trace.last().pooled)?;
    Ok((conf, trace))
}

pub fn score_pair<T: Real>(
    params: &ModelParams<T>,
    query: &FeatureSequence,
    segment: SegmentInput<'_, T>,
) -> Result<(Confidence, AttentionTrace<T>)> {
    let vq = encode_query(params, query)?;
    match segment {
        SegmentInput::Raw(seq) => score_encoded(params, &vq, &encode_segment(params, seq)?),
        SegmentInput::Encoded(enc) => score_encoded(params, &vq, enc),
    }
}

/// Loss of one scored pair against its target.
pub fn pair_loss(detector: Detector, conf: &Confidence, target: Target) -> f64 {
    match (detector, target) {
        (Detector::Cos, Target::Label(y)) => bce(conf.prediction(detector), y),
        (Detector::Cos, Target::Score(t)) => mse_loss(conf.prediction(detector), t),
        (_, Target::Label(y)) => cross_entropy_loss(&conf.logits.expect("network detector logits"), y),
        (_, Target::Score(t)) => mse_loss(conf.score, t),
    }
}

fn bce(p: f64, y: bool) -> f64 {
    let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    if y {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

fn bce_grad(p: f64, y: bool) -> f64 {
    let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    if y {
        -1.0 / p
    } else {
        1.0 / (1.0 - p)
    }
}

/// Full forward and backward pass for one pair. Gradients are added into
/// `grads`; the return value is the loss.
pub fn forward_backward(
    params: &ModelParams<f64>,
    query: &[f64],
    query_len: usize,
    segment: &[f64],
    segment_len: usize,
    target: Target,
    grads: &mut ModelParams<f64>,
) -> Result<f64> {
    let cfg = &params.config;
    let h = cfg.hidden_dim;
    let d = cfg.feature_dim;
    if query_len == 0 || segment_len == 0 {
        return Err(Error::Validation("empty query or segment".into()));
    }
    if query.len() != query_len * d || segment.len() != segment_len * d {
        return Err(Error::Validation(format!("inputs must have {d} values per frame")));
    }
    let q_traces = stack_forward(&params.lstm, query.to_vec(), query_len);
    let s_traces = stack_forward(&params.lstm, segment.to_vec(), segment_len);
    let q_top = &q_traces.last().expect("non-empty stack").hidden;
    let vq = q_top[(query_len - 1) * h..].to_vec();
    let enc = SegmentEncoding::new("", s_traces.last().expect("non-empty stack").hidden.clone(), h);
    let trace = run_hops_pooled(&vq, &enc, cfg.hops, cfg.pooling)?;
    let dq_vec = match cfg.detector_query {
        DetectorQuery::Original => &vq,
        DetectorQuery::LastHop => &trace.last().query,
    };
    let vs = &trace.last().pooled;

    let mut d_dq = vec![0.0; h];
    let mut d_vs = vec![0.0; h];
    let parts = cosine_parts(dq_vec, vs);
    let loss = match cfg.detector {
        Detector::Cos => {
            let p = (1.0 + parts.0) / 2.0;
            let (loss, dp) = match target {
                Target::Label(y) => (bce(p, y), bce_grad(p, y)),
                Target::Score(t) => (mse_loss(p, t), mse_grad(p, t)),
            };
            cosine_backward(dq_vec, vs, parts, dp / 2.0, &mut d_dq, &mut d_vs);
            loss
        }
        det => {
            let ff = params
                .detector
                .as_ref()
                .ok_or_else(|| Error::Validation("network detector has no parameters".into()))?;
            let mut x = Vec::with_capacity(ff.input_dim());
            x.extend_from_slice(dq_vec);
            x.extend_from_slice(vs);
            if det == Detector::NnCos {
                x.push(parts.0);
            }
            let (logits, ff_trace) = ff.forward_traced(&x)?;
            let (loss, dlogits) = match target {
                Target::Label(y) => (cross_entropy_loss(&logits, y), cross_entropy_grad(&logits, y)),
                Target::Score(t) => {
                    let p = softmax(&logits);
                    let pos = p[POSITIVE];
                    let dp = mse_grad(pos, t);
                    let mut dl = vec![0.0; 2];
                    dl[POSITIVE] = dp * pos * (1.0 - pos);
                    dl[1 - POSITIVE] = -dp * pos * p[1 - POSITIVE];
                    (mse_loss(pos, t), dl)
                }
            };
            let grad_ff = grads.detector.as_mut().expect("gradient mirrors parameters");
            let dx = ff.backward(&ff_trace, &dlogits, grad_ff);
            d_dq.copy_from_slice(&dx[..h]);
            d_vs.copy_from_slice(&dx[h..2 * h]);
            if det == Detector::NnCos {
                cosine_backward(dq_vec, vs, parts, dx[2 * h], &mut d_dq, &mut d_vs);
            }
            loss
        }
    };
    if !loss.is_finite() {
        return Err(Error::Diverged(format!("non-finite loss {loss}")));
    }

    let last_query = (cfg.detector_query == DetectorQuery::LastHop).then_some(&d_dq[..]);
    let (d_frames, mut d_vq) = hops_backward(&enc, &trace, cfg.pooling, &d_vs, last_query);
    if cfg.detector_query == DetectorQuery::Original {
        for (a, b) in d_vq.iter_mut().zip(&d_dq) {
            *a += b;
        }
    }
    stack_backward(&params.lstm, &s_traces, d_frames, &mut grads.lstm);
    let mut d_q_top = vec![0.0; query_len * h];
    d_q_top[(query_len - 1) * h..].copy_from_slice(&d_vq);
    stack_backward(&params.lstm, &q_traces, d_q_top, &mut grads.lstm);
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Pooling};
    use crate::tensor::gradcheck::{gradient_check, GradCheckOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn config(hops: usize, detector: Detector) -> ModelConfig {
        ModelConfig {
            feature_dim: 3,
            hidden_dim: 4,
            lstm_layers: 2,
            hops,
            detector,
            detector_widths: vec![6, 5, 2],
            detector_query: DetectorQuery::Original,
            pooling: Pooling::Attention,
        }
    }

    fn seq(rng: &mut ChaCha8Rng, id: &str, frames: usize, dim: usize) -> FeatureSequence {
        let v = (0..frames * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        FeatureSequence::new(id, v, dim, 0.01).unwrap()
    }

    #[test]
    fn single_frame_query_is_its_encoding() {
        let p = ModelParams::<f64>::init(&config(1, Detector::Cos), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = seq(&mut rng, "q", 1, 3);
        let vq = encode_query(&p, &q).unwrap();
        let enc = encode_segment(&p, &q).unwrap();
        assert_eq!(vq, enc.hidden);
    }

    #[test]
    fn final_frame_changes_query_vector() {
        let p = ModelParams::<f64>::init(&config(1, Detector::Cos), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = seq(&mut rng, "a", 6, 3);
        let mut b = a.clone();
        b.as_mut_slice()[5 * 3] += 0.5;
        let va = encode_query(&p, &a).unwrap();
        let vb = encode_query(&p, &b).unwrap();
        let diff: f64 = va.iter().zip(&vb).map(|(x, y)| (x - y).powi(2)).sum();
        assert!(diff > 0.0);
        assert_eq!(va, encode_query(&p, &a).unwrap());
    }

    #[test]
    fn context_changes_the_in_segment_encoding() {
        let p = ModelParams::<f64>::init(&config(1, Detector::Cos), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = seq(&mut rng, "q", 5, 3);
        let ctx = seq(&mut rng, "c", 4, 3);
        let joined = FeatureSequence::new("s", [ctx.as_slice(), q.as_slice()].concat(), 3, 0.01).unwrap();
        let vq = encode_query(&p, &q).unwrap();
        let enc = encode_segment(&p, &joined).unwrap();
        assert_ne!(enc.row(4 + 5 - 1), &vq[..]);
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let p = ModelParams::<f64>::init(&config(1, Detector::Cos), 5).unwrap();
        assert!(matches!(FeatureSequence::new("e", vec![], 3, 0.01), Err(Error::Validation(_))));
        let mut g = p.zeros_like();
        let r = forward_backward(&p, &[], 0, &[0.0; 3], 1, Target::Label(true), &mut g);
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn cos_detector_self_similarity_is_one() {
        let p = ModelParams::<f64>::init(&config(1, Detector::Cos), 1).unwrap();
        let v = [0.3, -0.2, 0.9, 0.1];
        let c = detect(&p, &v, &v).unwrap();
        assert!((c.score - 1.0).abs() < 1e-12);
        assert!(c.logits.is_none());
    }

    #[test]
    fn zero_final_layer_gives_bias_logits() {
        let mut p = ModelParams::<f64>::init(&config(1, Detector::Nn), 1).unwrap();
        let ff = p.detector.as_mut().unwrap();
        let last = ff.layers.last_mut().unwrap();
        last.w.fill_zero();
        last.b.data_mut().copy_from_slice(&[0.4, -0.1]);
        let c = detect(&p, &[1.0, 2.0, 3.0, 4.0], &[0.5, 0.5, 0.5, 0.5]).unwrap();
        assert_eq!(c.logits, Some([0.4, -0.1]));
        let expected = 0.4f64.exp() / (0.4f64.exp() + (-0.1f64).exp());
        assert!((c.score - expected).abs() < 1e-15);
    }

    #[test]
    fn detect_rejects_wrong_dims() {
        let p = ModelParams::<f64>::init(&config(1, Detector::Nn), 1).unwrap();
        assert!(matches!(detect(&p, &[1.0; 3], &[1.0; 4]), Err(Error::Validation(_))));
    }

    #[test]
    fn scoring_is_deterministic_and_cache_transparent() {
        for det in [Detector::Cos, Detector::Nn, Detector::NnCos] {
            let p = ModelParams::<f64>::init(&config(3, det), 8).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let q = seq(&mut rng, "q", 5, 3);
            let s = seq(&mut rng, "s", 20, 3);
            let a = score_pair(&p, &q, SegmentInput::Raw(&s)).unwrap();
            let b = score_pair(&p, &q, SegmentInput::Raw(&s)).unwrap();
            let enc = encode_segment(&p, &s).unwrap();
            let c = score_pair(&p, &q, SegmentInput::Encoded(&enc)).unwrap();
            assert_eq!(a, b);
            assert_eq!(a, c);
            assert_eq!(a.1.hops.len(), 3);
            if det != Detector::Cos {
                assert!((0.0..=1.0).contains(&a.0.score));
            }
        }
    }

    #[test]
    fn forward_backward_loss_matches_scoring() {
        for det in [Detector::Cos, Detector::Nn, Detector::NnCos] {
            let p = ModelParams::<f64>::init(&config(2, det), 10).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let q = seq(&mut rng, "q", 4, 3);
            let s = seq(&mut rng, "s", 9, 3);
            for target in [Target::Label(true), Target::Label(false), Target::Score(0.3)] {
                let (conf, _) = score_pair(&p, &q, SegmentInput::Raw(&s)).unwrap();
                let mut g = p.zeros_like();
                let loss = forward_backward(&p, &q.as_f64(), 4, &s.as_f64(), 9, target, &mut g).unwrap();
                assert!((loss - pair_loss(det, &conf, target)).abs() < 1e-12);
            }
        }
    }

    fn check_model(hops: usize, det: Detector, query: DetectorQuery, pooling: Pooling, target: Target, seed: u64) -> f64 {
        let mut cfg = config(hops, det);
        cfg.detector_query = query;
        cfg.pooling = pooling;
        let params = ModelParams::<f64>::init(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let q: Vec<f64> = (0..4 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s: Vec<f64> = (0..7 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut probe = params.clone();
        let report = gradient_check(
            |flat| {
                probe.unflatten(flat);
                let mut g = probe.zeros_like();
                let loss = forward_backward(&probe, &q, 4, &s, 7, target, &mut g).unwrap();
                (loss, g.flatten())
            },
            &params.flatten(),
            &GradCheckOptions {
                seed,
                ..GradCheckOptions::default()
            },
        )
        .unwrap();
        report.max_rel_error
    }

    #[test]
    fn whole_model_gradients_match_finite_differences() {
        for hops in 1..=3 {
            for det in [Detector::Cos, Detector::Nn, Detector::NnCos] {
                for target in [Target::Label(true), Target::Label(false), Target::Score(0.7)] {
                    let err = check_model(hops, det, DetectorQuery::Original, Pooling::Attention, target, hops as u64);
                    assert!(err < 1e-4, "hops={hops} det={det:?} target={target:?} err={err}");
                }
            }
        }
    }

    #[test]
    fn ablation_variants_have_correct_gradients() {
        for det in [Detector::Cos, Detector::NnCos] {
            let err = check_model(2, det, DetectorQuery::LastHop, Pooling::Attention, Target::Label(true), 3);
            assert!(err < 1e-4, "last-hop {det:?} err={err}");
            let err = check_model(2, det, DetectorQuery::Original, Pooling::LastFrame, Target::Score(0.2), 4);
            assert!(err < 1e-4, "last-frame {det:?} err={err}");
        }
    }
}
