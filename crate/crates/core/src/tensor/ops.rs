//! Softmax, cosine similarity and the two training losses, with gradients.

use super::{dot, Real};

/// Norm below which a vector counts as zero for cosine similarity.
pub const ZERO_NORM: f64 = 1e-12;

pub fn softmax<T: Real>(scores: &[T]) -> Vec<T> {
    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total: T = out.iter().copied().sum();
    out.iter_mut().for_each(|v| *v = *v / total);
    out
}

/// Given `y = softmax(x)` and `dL/dy`, returns `dL/dx`.
pub fn softmax_backward<T: Real>(y: &[T], dy: &[T]) -> Vec<T> {
    let inner = dot(y, dy);
    y.iter().zip(dy).map(|(&yi, &gi)| yi * (gi - inner)).collect()
}

pub fn log_softmax<T: Real>(scores: &[T]) -> Vec<T> {
    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + scores.iter().map(|&s| (s - max).exp()).sum::<T>().ln();
    scores.iter().map(|&s| s - lse).collect()
}

/// `a . b / (|a| |b|)`, or 0 when either norm is below [`ZERO_NORM`].
pub fn cosine_similarity<T: Real>(a: &[T], b: &[T]) -> T {
    cosine_parts(a, b).0
}

/// Cosine similarity together with the two norms.
pub fn cosine_parts<T: Real>(a: &[T], b: &[T]) -> (T, T, T) {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    let eps = T::of_f64(ZERO_NORM);
    if na < eps || nb < eps {
        return (T::zero(), na, nb);
    }
    let c = dot(a, b) / (na * nb);
    (c.max(-T::one()).min(T::one()), na, nb)
}

/// Accumulates `dc * d cos(a, b) / da` into `da` and likewise for `db`.
pub fn cosine_backward<T: Real>(
    a: &[T],
    b: &[T],
    (c, na, nb): (T, T, T),
    dc: T,
    da: &mut [T],
    db: &mut [T],
) {
    let eps = T::of_f64(ZERO_NORM);
    if na < eps || nb < eps || dc == T::zero() {
        return;
    }
    let inv = T::one() / (na * nb);
    let ca = c / (na * na);
    let cb = c / (nb * nb);
    for k in 0..a.len() {
        da[k] += dc * (b[k] * inv - ca * a[k]);
        db[k] += dc * (a[k] * inv - cb * b[k]);
    }
}

/// Index of the positive class in two-logit outputs.
pub const POSITIVE: usize = 0;

/// `-log softmax(logits)[class]` where `class` is [`POSITIVE`] for `true`.
pub fn cross_entropy_loss<T: Real>(logits: &[T], label: bool) -> T {
    -log_softmax(logits)[class_index(label)]
}

pub fn cross_entropy_grad<T: Real>(logits: &[T], label: bool) -> Vec<T> {
    let mut g = softmax(logits);
    g[class_index(label)] -= T::one();
    g
}

fn class_index(label: bool) -> usize {
    if label {
        POSITIVE
    } else {
        1 - POSITIVE
    }
}

pub fn mse_loss<T: Real>(pred: T, target: T) -> T {
    (pred - target) * (pred - target)
}

pub fn mse_grad<T: Real>(pred: T, target: T) -> T {
    T::of_f64(2.0) * (pred - target)
}
