//! Dense-tensor reverse-mode differentiation, plus the optimizer.

mod conv;
mod graph;
mod optim;
mod params;

pub use conv::{Conv3dGeometry, PoolGeometry};
pub use graph::{CustomOp, Gradients, Graph, Var, PROB_FLOOR};
pub use optim::{clip_global_norm, global_norm, AdamConfig, OptimizerState, StepReport};
pub use params::{BoundParams, ParamId, ParamSet};

pub(crate) use graph::softmax_raw;
#[cfg(test)]
pub(crate) use graph::matmul_raw;

use rand::Rng;

use crate::error::{AfnError, Result};
use crate::tensor::{Real, Tensor};

/// Inverted-dropout mask: each entry is 0 with probability `rate`,
/// otherwise `1 / (1 - rate)`.
pub fn dropout_mask<F: Real, R: Rng + ?Sized>(shape: &[usize], rate: f64, rng: &mut R) -> Result<Tensor<F>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(AfnError::config("dropout", format!("rate must be in [0, 1), got {rate}")));
    }
    let keep = F::of(1.0 / (1.0 - rate));
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.random::<f64>() < rate { F::zero() } else { keep })
        .collect();
    Tensor::new(shape, data)
}

/// Uniform initialisation in `±1/sqrt(fan_in)`.
pub fn uniform_init<F: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<F> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| F::of(rng.random_range(-bound..=bound))).collect();
    Tensor::new(shape, data).expect("init shape")
}

/// Handles of one LSTM cell's parameters inside a graph.
///
/// Gate rows are stacked in the order input, forget, cell, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    /// `[4H, in]`
    pub w_ih: Var,
    /// `[4H, H]`
    pub w_hh: Var,
    /// `[4H]`
    pub bias: Var,
}

/// One step of a standard four-gate LSTM. Returns `(h, c)`.
pub fn lstm_cell<F: Real>(g: &mut Graph<'_, F>, x: Var, h_prev: Var, c_prev: Var, w: LstmVars) -> Result<(Var, Var)> {
    let hidden = g.value(h_prev).len();
    if g.shape(w.w_hh) != [4 * hidden, hidden] || g.value(c_prev).len() != hidden {
        return Err(AfnError::dim("lstm_cell", g.shape(w.w_hh), &[4 * hidden, hidden]));
    }
    let zx = g.linear(x, w.w_ih, w.bias)?;
    let col = g.reshape(h_prev, &[hidden, 1])?;
    let zh = g.matmul(w.w_hh, col)?;
    let zh = g.reshape(zh, &[4 * hidden])?;
    let z = g.add(zx, zh)?;
    let i = g.slice(z, 0, hidden)?;
    let f = g.slice(z, hidden, hidden)?;
    let c_hat = g.slice(z, 2 * hidden, hidden)?;
    let o = g.slice(z, 3 * hidden, hidden)?;
    let i = g.sigmoid(i)?;
    let f = g.sigmoid(f)?;
    let c_hat = g.tanh(c_hat)?;
    let o = g.sigmoid(o)?;
    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, c_hat)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c)?;
    let h = g.mul(o, tc)?;
    Ok((h, c))
}

/// Gate bias with the forget slice set to 1.
pub fn lstm_bias<F: Real>(hidden: usize) -> Tensor<F> {
    let mut b = Tensor::zeros(&[4 * hidden]);
    for v in &mut b.data_mut()[hidden..2 * hidden] {
        *v = F::one();
    }
    b
}
