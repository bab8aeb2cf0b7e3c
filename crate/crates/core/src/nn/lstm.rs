//! LSTM cell with gate order `[input, forget, cell, output]`.
//!
//! The four gate pre-activations come from one `4h × 2h` product of the
//! configured [`GateLayer`] with `[x_t, h_{t−1}]`, plus a bias.

use alloc::vec;
use alloc::vec::Vec;

use crate::dkp::CmrMaskDraw;
use crate::error::{Error, Result};
use crate::nn::gate::{GateCache, GateGrads, GateLayer};

#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayer {
    pub gate: GateLayer,
    pub bias: Vec<f64>,
    hidden: usize,
}

impl LstmLayer {
    pub fn new(gate: GateLayer, bias: Vec<f64>) -> Result<Self> {
        let (rows, cols) = gate.shape();
        if cols % 2 != 0 || rows != 2 * cols {
            return Err(Error::shape("LstmLayer::new", "4h x 2h", alloc::format!("{rows}x{cols}")));
        }
        if bias.len() != rows {
            return Err(Error::shape("LstmLayer::new (bias)", rows, bias.len()));
        }
        Ok(Self {
            gate,
            bias,
            hidden: cols / 2,
        })
    }

    /// Zero bias except the forget gate, which starts at 1.
    pub fn default_bias(hidden: usize) -> Vec<f64> {
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        b
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }
}

#[derive(Clone, Debug)]
pub struct LstmStepCache {
    batch: usize,
    gate: GateCache,
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    c_prev: Vec<f64>,
    tanh_c: Vec<f64>,
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

/// One timestep for `batch` sequences. `x_concat` is `batch × 2h` holding
/// `[x_t, h_{t−1}]` per row; `c_prev` is `batch × h`. Returns `(h_t, c_t)`.
pub fn lstm_step(
    layer: &LstmLayer,
    x_concat: &[f64],
    c_prev: &[f64],
    batch: usize,
    masks: Option<&[CmrMaskDraw]>,
) -> Result<(Vec<f64>, Vec<f64>, LstmStepCache)> {
    let h = layer.hidden;
    if c_prev.len() != batch * h {
        return Err(Error::shape("lstm_step (c_prev)", batch * h, c_prev.len()));
    }
    let (z, gate) = layer.gate.forward_batch(x_concat, batch, masks)?;
    let n = batch * h;
    let (mut i, mut f, mut g, mut o) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut c = vec![0.0; n];
    let mut tanh_c = vec![0.0; n];
    let mut h_out = vec![0.0; n];
    for s in 0..batch {
        let zs = &z[s * 4 * h..(s + 1) * 4 * h];
        for j in 0..h {
            let k = s * h + j;
            i[k] = sigmoid(zs[j] + layer.bias[j]);
            f[k] = sigmoid(zs[h + j] + layer.bias[h + j]);
            g[k] = libm::tanh(zs[2 * h + j] + layer.bias[2 * h + j]);
            o[k] = sigmoid(zs[3 * h + j] + layer.bias[3 * h + j]);
            c[k] = f[k] * c_prev[k] + i[k] * g[k];
            tanh_c[k] = libm::tanh(c[k]);
            h_out[k] = o[k] * tanh_c[k];
        }
    }
    Ok((
        h_out,
        c,
        LstmStepCache {
            batch,
            gate,
            i,
            f,
            g,
            o,
            c_prev: c_prev.to_vec(),
            tanh_c,
        },
    ))
}

/// Backward through one timestep given `∂L/∂h_t` and `∂L/∂c_t`.
/// Accumulates gate and bias gradients; returns `(∂L/∂x_concat, ∂L/∂c_{t−1})`.
pub fn lstm_step_backward(
    layer: &LstmLayer,
    cache: &LstmStepCache,
    dh: &[f64],
    dc: &[f64],
    gate_grads: &mut GateGrads,
    bias_grad: &mut [f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let h = layer.hidden;
    let batch = cache.batch;
    let n = batch * h;
    if dh.len() != n || dc.len() != n {
        return Err(Error::shape("lstm_step_backward", n, dh.len().min(dc.len())));
    }
    let mut dz = vec![0.0; batch * 4 * h];
    let mut dc_prev = vec![0.0; n];
    for s in 0..batch {
        let dzs = &mut dz[s * 4 * h..(s + 1) * 4 * h];
        for j in 0..h {
            let k = s * h + j;
            let (i, f, g, o, tc) = (cache.i[k], cache.f[k], cache.g[k], cache.o[k], cache.tanh_c[k]);
            let dct = dc[k] + dh[k] * o * (1.0 - tc * tc);
            dzs[j] = dct * g * i * (1.0 - i);
            dzs[h + j] = dct * cache.c_prev[k] * f * (1.0 - f);
            dzs[2 * h + j] = dct * i * (1.0 - g * g);
            dzs[3 * h + j] = dh[k] * tc * o * (1.0 - o);
            dc_prev[k] = dct * f;
        }
        for (bg, d) in bias_grad.iter_mut().zip(dzs.iter()) {
            *bg += d;
        }
    }
    let mut dx = vec![0.0; batch * 2 * h];
    layer.gate.backward_batch(&cache.gate, &dz, gate_grads, &mut dx)?;
    Ok((dx, dc_prev))
}
