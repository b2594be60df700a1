//! Forget-gate LSTM (no peepholes) with full backpropagation through time.
//!
//! Gate pre-activations are stacked as `[input, forget, output, candidate]`
//! blocks of `h` rows in `w` (`4h x d_in`), `u` (`4h x h`) and `b` (`4h`).

use rand::Rng;

use super::{axpy, matvec_acc, matvec_t_acc, outer_acc, sigmoid, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LstmCellParams<T = f64> {
    pub w: Tensor<T>,
    pub u: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Real> LstmCellParams<T> {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            w: Tensor::zeros(&[4 * hidden, input_dim]),
            u: Tensor::zeros(&[4 * hidden, hidden]),
            b: Tensor::zeros(&[4 * hidden]),
        }
    }

    /// Weights uniform in `[-1/sqrt(h), 1/sqrt(h)]`, forget bias 1, other biases 0.
    pub fn init(input_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(input_dim, hidden);
        let bound = 1.0 / (hidden as f64).sqrt();
        for v in p.w.data_mut().iter_mut().chain(p.u.data_mut()) {
            *v = T::of_f64(rng.gen_range(-bound..=bound));
        }
        for v in &mut p.b.data_mut()[hidden..2 * hidden] {
            *v = T::one();
        }
        p
    }

    pub fn hidden(&self) -> usize {
        self.u.shape()[1]
    }

    pub fn input_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn cast<U: Real>(&self) -> LstmCellParams<U> {
        LstmCellParams {
            w: self.w.cast(),
            u: self.u.cast(),
            b: self.b.cast(),
        }
    }
}

/// Activated gates `[i, f, o, g]` from `W x + U h_prev + b`.
fn gates<T: Real>(p: &LstmCellParams<T>, x: &[T], h_prev: &[T], z: &mut [T]) {
    let h = p.hidden();
    z.copy_from_slice(p.b.data());
    matvec_acc(p.w.data(), x, z);
    matvec_acc(p.u.data(), h_prev, z);
    for v in &mut z[..3 * h] {
        *v = sigmoid(*v);
    }
    for v in &mut z[3 * h..] {
        *v = v.tanh();
    }
}

/// One recurrence step, returning `(h_t, c_t)`.
pub fn lstm_step<T: Real>(
    params: &LstmCellParams<T>,
    x: &[T],
    h_prev: &[T],
    c_prev: &[T],
) -> Result<(Vec<T>, Vec<T>)> {
    let h = params.hidden();
    if x.len() != params.input_dim() || h_prev.len() != h || c_prev.len() != h {
        return Err(Error::Validation(format!(
            "lstm_step: expected input {} and state {h}, got {}, {}, {}",
            params.input_dim(),
            x.len(),
            h_prev.len(),
            c_prev.len()
        )));
    }
    let mut z = vec![T::zero(); 4 * h];
    gates(params, x, h_prev, &mut z);
    let mut c = vec![T::zero(); h];
    let mut out = vec![T::zero(); h];
    for k in 0..h {
        c[k] = z[h + k] * c_prev[k] + z[k] * z[3 * h + k];
        out[k] = z[2 * h + k] * c[k].tanh();
    }
    Ok((out, c))
}

/// Everything one layer's backward pass needs, `T` rows each.
#[derive(Debug, Clone)]
pub struct LayerTrace<T> {
    pub inputs: Vec<T>,
    pub hidden: Vec<T>,
    pub cells: Vec<T>,
    pub gates: Vec<T>,
}

/// Runs one layer over `len` input rows from zero initial state.
pub fn layer_forward<T: Real>(p: &LstmCellParams<T>, inputs: Vec<T>, len: usize) -> LayerTrace<T> {
    let h = p.hidden();
    let mut hidden = vec![T::zero(); len * h];
    let mut cells = vec![T::zero(); len * h];
    let mut all_gates = vec![T::zero(); len * 4 * h];
    let d = p.input_dim();
    let zero = vec![T::zero(); h];
    for t in 0..len {
        let (h_prev, c_prev) = if t == 0 {
            (&zero[..], &zero[..])
        } else {
            (&hidden[(t - 1) * h..t * h], &cells[(t - 1) * h..t * h])
        };
        let z = &mut all_gates[t * 4 * h..(t + 1) * 4 * h];
        gates(p, &inputs[t * d..(t + 1) * d], h_prev, z);
        let mut c_new = vec![T::zero(); h];
        let mut h_new = vec![T::zero(); h];
        for k in 0..h {
            c_new[k] = z[h + k] * c_prev[k] + z[k] * z[3 * h + k];
            h_new[k] = z[2 * h + k] * c_new[k].tanh();
        }
        cells[t * h..(t + 1) * h].copy_from_slice(&c_new);
        hidden[t * h..(t + 1) * h].copy_from_slice(&h_new);
    }
    LayerTrace {
        inputs,
        hidden,
        cells,
        gates: all_gates,
    }
}

/// Backpropagates `d_hidden` (`len x h`) through one layer, accumulating
/// parameter gradients into `grad` and returning the gradient on the inputs.
pub fn layer_backward<T: Real>(
    p: &LstmCellParams<T>,
    trace: &LayerTrace<T>,
    d_hidden: &[T],
    grad: &mut LstmCellParams<T>,
) -> Vec<T> {
    let h = p.hidden();
    let d = p.input_dim();
    let len = trace.hidden.len() / h;
    let mut d_inputs = vec![T::zero(); len * d];
    let mut dh_next = vec![T::zero(); h];
    let mut dc_next = vec![T::zero(); h];
    let mut dz = vec![T::zero(); 4 * h];
    let zero = vec![T::zero(); h];
    let one = T::one();
    for t in (0..len).rev() {
        let z = &trace.gates[t * 4 * h..(t + 1) * 4 * h];
        let c = &trace.cells[t * h..(t + 1) * h];
        let (h_prev, c_prev) = if t == 0 {
            (&zero[..], &zero[..])
        } else {
            (&trace.hidden[(t - 1) * h..t * h], &trace.cells[(t - 1) * h..t * h])
        };
        for k in 0..h {
            let (i, f, o, g) = (z[k], z[h + k], z[2 * h + k], z[3 * h + k]);
            let tc = c[k].tanh();
            let dh = d_hidden[t * h + k] + dh_next[k];
            let dc = dh * o * (one - tc * tc) + dc_next[k];
            dz[k] = dc * g * i * (one - i);
            dz[h + k] = dc * c_prev[k] * f * (one - f);
            dz[2 * h + k] = dh * tc * o * (one - o);
            dz[3 * h + k] = dc * i * (one - g * g);
            dc_next[k] = dc * f;
        }
        axpy(one, &dz, grad.b.data_mut());
        outer_acc(grad.w.data_mut(), &dz, &trace.inputs[t * d..(t + 1) * d]);
        outer_acc(grad.u.data_mut(), &dz, h_prev);
        matvec_t_acc(p.w.data(), &dz, &mut d_inputs[t * d..(t + 1) * d]);
        dh_next.iter_mut().for_each(|v| *v = T::zero());
        matvec_t_acc(p.u.data(), &dz, &mut dh_next);
    }
    d_inputs
}

/// Forward traces of every layer of a stack.
pub fn stack_forward<T: Real>(stack: &[LstmCellParams<T>], inputs: Vec<T>, len: usize) -> Vec<LayerTrace<T>> {
    let mut traces: Vec<LayerTrace<T>> = Vec::with_capacity(stack.len());
    let mut x = inputs;
    for layer in stack {
        let trace = layer_forward(layer, x, len);
        x = trace.hidden.clone();
        traces.push(trace);
    }
    traces
}

/// Top-layer hidden states of a stack as a `len x h` row-major buffer.
pub fn stack_hidden<T: Real>(stack: &[LstmCellParams<T>], inputs: &[T], len: usize) -> Vec<T> {
    let mut x = inputs.to_vec();
    for layer in stack {
        x = layer_forward_hidden(layer, &x, len);
    }
    x
}

/// Like [`layer_forward`] but keeps only the hidden states.
fn layer_forward_hidden<T: Real>(p: &LstmCellParams<T>, inputs: &[T], len: usize) -> Vec<T> {
    let h = p.hidden();
    let d = p.input_dim();
    let mut hidden = vec![T::zero(); len * h];
    let mut c = vec![T::zero(); h];
    let mut h_prev = vec![T::zero(); h];
    let mut z = vec![T::zero(); 4 * h];
    for t in 0..len {
        gates(p, &inputs[t * d..(t + 1) * d], &h_prev, &mut z);
        for k in 0..h {
            c[k] = z[h + k] * c[k] + z[k] * z[3 * h + k];
            h_prev[k] = z[2 * h + k] * c[k].tanh();
        }
        hidden[t * h..(t + 1) * h].copy_from_slice(&h_prev);
    }
    hidden
}

/// Backpropagates top-layer gradients through the whole stack.
pub fn stack_backward<T: Real>(
    stack: &[LstmCellParams<T>],
    traces: &[LayerTrace<T>],
    d_top: Vec<T>,
    grads: &mut [LstmCellParams<T>],
) {
    let mut d = d_top;
    for ((layer, trace), grad) in stack.iter().zip(traces).zip(grads.iter_mut()).rev() {
        d = layer_backward(layer, trace, &d, grad);
    }
}

/// Encodes `rows` (`len x d_in`, row-major) with the stack, returning the
/// last top-layer state and all top-layer states.
pub fn lstm_encode<T: Real>(stack: &[LstmCellParams<T>], rows: &[T], len: usize) -> Result<(Vec<T>, Vec<T>)> {
    let first = stack
        .first()
        .ok_or_else(|| Error::Validation("empty LSTM stack".into()))?;
    if len == 0 {
        return Err(Error::Validation("cannot encode an empty sequence".into()));
    }
    if rows.len() != len * first.input_dim() {
        return Err(Error::Validation(format!(
            "expected {len} rows of dim {}, got {} values",
            first.input_dim(),
            rows.len()
        )));
    }
    for pair in stack.windows(2) {
        if pair[1].input_dim() != pair[0].hidden() {
            return Err(Error::Validation("LSTM stack layer dims do not chain".into()));
        }
    }
    let all = stack_hidden(stack, rows, len);
    let h = stack.last().unwrap().hidden();
    let last = all[(len - 1) * h..].to_vec();
    Ok((last, all))
}
