//! Fully connected layers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{axpy, matvec_acc, matvec_t_acc, outer_acc, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(T::zero()),
        }
    }

    fn derivative<T: Real>(self, pre: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu if pre > T::zero() => T::one(),
            Activation::Relu => T::zero(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T = f64> {
    /// `out x in`, row-major.
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    pub activation: Activation,
}

impl<T: Real> Dense<T> {
    pub fn input_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.w.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward<T = f64> {
    pub layers: Vec<Dense<T>>,
}

/// Per-layer inputs and pre-activations from a forward pass.
#[derive(Debug, Clone)]
pub struct FeedForwardTrace<T> {
    inputs: Vec<Vec<T>>,
    pre: Vec<Vec<T>>,
}

impl<T: Real> FeedForward<T> {
    pub fn zeros(input_dim: usize, widths: &[usize], hidden: Activation, last: Activation) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut d = input_dim;
        for (k, &w) in widths.iter().enumerate() {
            layers.push(Dense {
                w: Tensor::zeros(&[w, d]),
                b: Tensor::zeros(&[w]),
                activation: if k + 1 == widths.len() { last } else { hidden },
            });
            d = w;
        }
        Self { layers }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(input_dim: usize, widths: &[usize], hidden: Activation, last: Activation, rng: &mut impl Rng) -> Self {
        let mut ff = Self::zeros(input_dim, widths, hidden, last);
        for layer in &mut ff.layers {
            let bound = (6.0 / (layer.input_dim() + layer.output_dim()) as f64).sqrt();
            for v in layer.w.data_mut() {
                *v = T::of_f64(rng.gen_range(-bound..=bound));
            }
        }
        ff
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output_dim()
    }

    pub fn cast<U: Real>(&self) -> FeedForward<U> {
        FeedForward {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    w: l.w.cast(),
                    b: l.b.cast(),
                    activation: l.activation,
                })
                .collect(),
        }
    }

    fn check_input(&self, x: &[T]) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Validation("feed-forward network has no layers".into()));
        }
        if x.len() != self.input_dim() {
            return Err(Error::Validation(format!(
                "feed-forward input has dim {}, expected {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        self.forward_traced(x).map(|(y, _)| y)
    }

    pub fn forward_traced(&self, x: &[T]) -> Result<(Vec<T>, FeedForwardTrace<T>)> {
        self.check_input(x)?;
        let mut trace = FeedForwardTrace {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut a = x.to_vec();
        for layer in &self.layers {
            let mut z = layer.b.data().to_vec();
            matvec_acc(layer.w.data(), &a, &mut z);
            let next = z.iter().map(|&v| layer.activation.apply(v)).collect();
            trace.inputs.push(std::mem::replace(&mut a, next));
            trace.pre.push(z);
        }
        Ok((a, trace))
    }

    /// Accumulates parameter gradients for output gradient `dy` and returns
    /// the gradient on the input.
    pub fn backward(&self, trace: &FeedForwardTrace<T>, dy: &[T], grad: &mut FeedForward<T>) -> Vec<T> {
        let mut d = dy.to_vec();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            for (g, &z) in d.iter_mut().zip(&trace.pre[k]) {
                *g *= layer.activation.derivative(z);
            }
            let gl = &mut grad.layers[k];
            axpy(T::one(), &d, gl.b.data_mut());
            outer_acc(gl.w.data_mut(), &d, &trace.inputs[k]);
            let mut dx = vec![T::zero(); layer.input_dim()];
            matvec_t_acc(layer.w.data(), &d, &mut dx);
            d = dx;
        }
        d
    }
}
