//! Dense tensors and the hand-written layers the detector is built from.
//!
//! Every differentiable layer exposes a forward pass that records what its
//! backward pass needs, and a backward pass that accumulates parameter
//! gradients into a mirror of the parameters. Forward passes are generic
//! over [`Real`] so inference can run in `f32`; training and gradient checks
//! run in `f64`.

pub mod adam;
pub mod checkpoint;
pub mod feed_forward;
pub mod gradcheck;
pub mod lstm;
pub mod ops;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use crate::error::{Error, Result};

pub use adam::{AdamConfig, AdamState};
pub use feed_forward::{Activation, Dense, FeedForward};
pub use gradcheck::{gradient_check, GradCheckOptions, GradCheckReport};
pub use lstm::{lstm_encode, lstm_step, LstmCellParams};
pub use ops::{cosine_similarity, cross_entropy_loss, mse_loss, softmax};

pub trait Real:
    num_traits::Float + Sum + AddAssign + SubAssign + MulAssign + Send + Sync + Debug + Default + 'static
{
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn of_f32(v: f32) -> Self;
}

impl Real for f64 {
    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn of_f32(v: f32) -> Self {
        f64::from(v)
    }
}

impl Real for f32 {
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
    fn of_f32(v: f32) -> Self {
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Validation(format!("tensor shape {shape:?} has a zero dim")));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Validation(format!(
                "shape {shape:?} needs {} values, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = T::zero());
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dot product with four independent accumulators.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 4];
    let chunks = n / 4;
    for k in 0..chunks {
        let i = 4 * k;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = T::zero();
    for i in 4 * chunks..n {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`.
#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out += W x` for row-major `W` of shape `out.len() x x.len()`.
#[inline]
pub fn matvec_acc<T: Real>(w: &[T], x: &[T], out: &mut [T]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o += dot(row, x);
    }
}

/// `out += W^T v` for row-major `W` of shape `v.len() x out.len()`.
#[inline]
pub fn matvec_t_acc<T: Real>(w: &[T], v: &[T], out: &mut [T]) {
    let cols = out.len();
    for (&vr, row) in v.iter().zip(w.chunks_exact(cols)) {
        if vr != T::zero() {
            axpy(vr, row, out);
        }
    }
}

/// `G += a b^T` for row-major `G` of shape `a.len() x b.len()`.
#[inline]
pub fn outer_acc<T: Real>(g: &mut [T], a: &[T], b: &[T]) {
    let cols = b.len();
    for (&ar, row) in a.iter().zip(g.chunks_exact_mut(cols)) {
        if ar != T::zero() {
            axpy(ar, b, row);
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
