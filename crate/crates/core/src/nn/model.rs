//! Word/character LSTM language model: embedding, stacked LSTM layers and
//! a softmax projection, trained with truncated backpropagation through time.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::Batch;
use crate::dense::{axpy, dot, DenseMatrix};
use crate::dkp::CmrMaskDraw;
use crate::error::{Error, Result};
use crate::nn::gate::GateGrads;
use crate::nn::loss::softmax_xent_into;
use crate::nn::lstm::{lstm_step, lstm_step_backward, LstmLayer, LstmStepCache};
use crate::nn::{ParamGroup, ParamMut, ParamRef, Parameterized};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct LmModel {
    vocab: usize,
    hidden: usize,
    pub embedding: DenseMatrix,
    pub layers: Vec<LstmLayer>,
    /// `None` ties the output projection to the embedding.
    pub proj: Option<DenseMatrix>,
    pub proj_bias: Vec<f64>,
}

/// Hidden and cell state per layer, each `batch × hidden`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

impl LstmState {
    pub fn zeros(layers: usize, batch: usize, hidden: usize) -> Self {
        Self {
            h: vec![vec![0.0; batch * hidden]; layers],
            c: vec![vec![0.0; batch * hidden]; layers],
        }
    }

    pub fn batch(&self, hidden: usize) -> usize {
        self.h.first().map_or(0, |h| h.len() / hidden.max(1))
    }
}

/// CMR masks indexed `[layer][timestep]`; `None` where dropout is off.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MaskPlan {
    masks: Vec<Vec<Option<Vec<CmrMaskDraw>>>>,
}

impl MaskPlan {
    pub fn none() -> Self {
        Self { masks: Vec::new() }
    }

    /// Fresh masks for every doped layer, sequence and timestep.
    pub fn draw(model: &LmModel, batch: usize, len: usize, rng: &mut Rng) -> Self {
        let masks = model
            .layers
            .iter()
            .map(|layer| {
                (0..len)
                    .map(|_| layer.gate.as_doped().and_then(|d| d.draw_masks(batch, rng)))
                    .collect()
            })
            .collect();
        Self { masks }
    }

    pub fn get(&self, layer: usize, t: usize) -> Option<&[CmrMaskDraw]> {
        self.masks.get(layer)?.get(t)?.as_deref()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.iter().flatten().all(Option::is_none)
    }
}

#[derive(Clone, Debug)]
struct StepTape {
    layers: Vec<LstmStepCache>,
    top: Vec<f64>,
    dlogits: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// Summed cross-entropy over all predicted tokens.
    pub loss_sum: f64,
    pub tokens: usize,
    pub final_state: LstmState,
    batch: usize,
    inputs: Vec<usize>,
    len: usize,
    tape: Option<Vec<StepTape>>,
}

impl ForwardPass {
    pub fn mean_loss(&self) -> f64 {
        self.loss_sum / self.tokens as f64
    }
}

/// Gradient buffers in [`Parameterized`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct LmGrads {
    pub embedding: DenseMatrix,
    pub gates: Vec<GateGrads>,
    pub biases: Vec<Vec<f64>>,
    pub proj: Option<DenseMatrix>,
    pub proj_bias: Vec<f64>,
}

impl LmGrads {
    pub fn zeros_for(model: &LmModel) -> Self {
        Self {
            embedding: DenseMatrix::zeros(model.vocab, model.hidden),
            gates: model.layers.iter().map(|l| l.gate.zero_grads()).collect(),
            biases: model.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
            proj: model.proj.as_ref().map(|p| DenseMatrix::zeros(p.rows(), p.cols())),
            proj_bias: vec![0.0; model.vocab],
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = vec![self.embedding.as_slice()];
        for (g, b) in self.gates.iter().zip(&self.biases) {
            out.extend(g.tensors());
            out.push(b.as_slice());
        }
        if let Some(p) = &self.proj {
            out.push(p.as_slice());
        }
        out.push(self.proj_bias.as_slice());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.embedding.as_mut_slice()];
        for (g, b) in self.gates.iter_mut().zip(self.biases.iter_mut()) {
            out.extend(g.tensors_mut());
            out.push(b.as_mut_slice());
        }
        if let Some(p) = &mut self.proj {
            out.push(p.as_mut_slice());
        }
        out.push(self.proj_bias.as_mut_slice());
        out
    }

    pub fn zero(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

impl LmModel {
    pub fn new(
        embedding: DenseMatrix,
        layers: Vec<LstmLayer>,
        proj: Option<DenseMatrix>,
        proj_bias: Vec<f64>,
    ) -> Result<Self> {
        let (vocab, hidden) = embedding.shape();
        if layers.is_empty() {
            return Err(Error::InvalidArgument("model needs at least one LSTM layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.hidden() != hidden {
                return Err(Error::shape("LmModel::new", format!("hidden {hidden}"), format!("layer {i} hidden {}", l.hidden())));
            }
        }
        if let Some(p) = &proj {
            if p.shape() != (vocab, hidden) {
                return Err(Error::shape("LmModel::new (proj)", format!("{vocab}x{hidden}"), format!("{}x{}", p.rows(), p.cols())));
            }
        }
        if proj_bias.len() != vocab {
            return Err(Error::shape("LmModel::new (proj bias)", vocab, proj_bias.len()));
        }
        Ok(Self {
            vocab,
            hidden,
            embedding,
            layers,
            proj,
            proj_bias,
        })
    }

    /// Uniform `[-scale, scale]` dense model.
    pub fn dense(vocab: usize, hidden: usize, layers: usize, tie: bool, scale: f64, rng: &mut Rng) -> Result<Self> {
        let mut uniform = |r, c| DenseMatrix::from_fn(r, c, |_, _| rng.uniform(-scale, scale));
        let embedding = uniform(vocab, hidden);
        let lstm = (0..layers)
            .map(|_| LstmLayer::new(super::GateLayer::Dense(uniform(4 * hidden, 2 * hidden)), LstmLayer::default_bias(hidden)))
            .collect::<Result<Vec<_>>>()?;
        let proj = if tie { None } else { Some(uniform(vocab, hidden)) };
        Self::new(embedding, lstm, proj, vec![0.0; vocab])
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn is_tied(&self) -> bool {
        self.proj.is_none()
    }

    pub fn output_weights(&self) -> &DenseMatrix {
        self.proj.as_ref().unwrap_or(&self.embedding)
    }

    pub fn param_count(&self) -> usize {
        self.params()
            .iter()
            .map(|p| p.mask.map_or(p.values.len(), |m| m.iter().filter(|&&a| a).count()))
            .sum()
    }

    pub fn zero_state(&self, batch: usize) -> LstmState {
        LstmState::zeros(self.layers.len(), batch, self.hidden)
    }

    /// Runs `batch` from `state`. With `keep_tape` the activations needed by
    /// [`LmModel::backward`] are retained.
    pub fn forward(&self, batch: &Batch, state: &LstmState, masks: &MaskPlan, keep_tape: bool) -> Result<ForwardPass> {
        let (bsz, len, h, v) = (batch.batch, batch.len, self.hidden, self.vocab);
        if state.h.len() != self.layers.len() || state.h.iter().chain(&state.c).any(|s| s.len() != bsz * h) {
            return Err(Error::shape("LmModel::forward (state)", format!("{} layers of {bsz}x{h}", self.layers.len()), "mismatched state"));
        }
        if let Some(&bad) = batch.inputs.iter().chain(&batch.targets).find(|&&id| id >= v) {
            return Err(Error::InvalidArgument(format!("token id {bad} outside vocabulary of {v}")));
        }
        let out_w = self.output_weights();
        let mut hs = state.h.clone();
        let mut cs = state.c.clone();
        let mut tape = keep_tape.then(|| Vec::with_capacity(len));
        let mut loss_sum = 0.0;
        let mut xcat = vec![0.0; bsz * 2 * h];
        let mut logits = vec![0.0; v];
        for t in 0..len {
            let mut x: Vec<f64> = (0..bsz).flat_map(|b| self.embedding.row(batch.input(b, t)).iter().copied()).collect();
            let mut caches = Vec::with_capacity(self.layers.len());
            for (l, layer) in self.layers.iter().enumerate() {
                for b in 0..bsz {
                    xcat[b * 2 * h..b * 2 * h + h].copy_from_slice(&x[b * h..(b + 1) * h]);
                    xcat[b * 2 * h + h..(b + 1) * 2 * h].copy_from_slice(&hs[l][b * h..(b + 1) * h]);
                }
                let (h_t, c_t, cache) = lstm_step(layer, &xcat, &cs[l], bsz, masks.get(l, t))?;
                hs[l].copy_from_slice(&h_t);
                cs[l] = c_t;
                x = h_t;
                if keep_tape {
                    caches.push(cache);
                }
            }
            let mut dlogits = if keep_tape { vec![0.0; bsz * v] } else { Vec::new() };
            let mut scratch = vec![0.0; v];
            for b in 0..bsz {
                let xb = &x[b * h..(b + 1) * h];
                for (i, lg) in logits.iter_mut().enumerate() {
                    *lg = dot(out_w.row(i), xb) + self.proj_bias[i];
                }
                let g = if keep_tape { &mut dlogits[b * v..(b + 1) * v] } else { &mut scratch[..] };
                loss_sum += softmax_xent_into(&logits, batch.target(b, t), g);
            }
            if let Some(tape) = tape.as_mut() {
                tape.push(StepTape {
                    layers: caches,
                    top: x,
                    dlogits,
                });
            }
        }
        if !loss_sum.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        Ok(ForwardPass {
            loss_sum,
            tokens: bsz * len,
            final_state: LstmState { h: hs, c: cs },
            batch: bsz,
            inputs: batch.inputs.clone(),
            len,
            tape,
        })
    }

    /// Accumulates the gradient of the mean loss of `pass` into `grads`.
    /// No gradient flows into the carried-in state.
    pub fn backward(&self, pass: &ForwardPass, grads: &mut LmGrads) -> Result<()> {
        let tape = pass
            .tape
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("forward pass was run without a tape".into()))?;
        let (bsz, h, v, nl) = (pass.batch, self.hidden, self.vocab, self.layers.len());
        let scale = 1.0 / pass.tokens as f64;
        let out_w = self.output_weights();
        let mut dh_next = vec![vec![0.0; bsz * h]; nl];
        let mut dc_next = vec![vec![0.0; bsz * h]; nl];
        for t in (0..pass.len).rev() {
            let step = &tape[t];
            let mut dh = vec![0.0; bsz * h];
            for b in 0..bsz {
                let xb = &step.top[b * h..(b + 1) * h];
                let dhb = &mut dh[b * h..(b + 1) * h];
                for i in 0..v {
                    let g = step.dlogits[b * v + i] * scale;
                    if g == 0.0 {
                        continue;
                    }
                    grads.proj_bias[i] += g;
                    let gw = match grads.proj.as_mut() {
                        Some(p) => &mut p.as_mut_slice()[i * h..(i + 1) * h],
                        None => &mut grads.embedding.as_mut_slice()[i * h..(i + 1) * h],
                    };
                    axpy(g, xb, gw);
                    axpy(g, out_w.row(i), dhb);
                }
            }
            for l in (0..nl).rev() {
                for (d, n) in dh.iter_mut().zip(&dh_next[l]) {
                    *d += n;
                }
                let (dx, dc_prev) = lstm_step_backward(
                    &self.layers[l],
                    &step.layers[l],
                    &dh,
                    &dc_next[l],
                    &mut grads.gates[l],
                    &mut grads.biases[l],
                )?;
                dc_next[l] = dc_prev;
                for b in 0..bsz {
                    dh[b * h..(b + 1) * h].copy_from_slice(&dx[b * 2 * h..b * 2 * h + h]);
                    dh_next[l][b * h..(b + 1) * h].copy_from_slice(&dx[b * 2 * h + h..(b + 1) * 2 * h]);
                }
            }
            let ge = grads.embedding.as_mut_slice();
            for b in 0..bsz {
                let id = pass.inputs[b * pass.len + t];
                axpy(1.0, &dh[b * h..(b + 1) * h], &mut ge[id * h..(id + 1) * h]);
            }
        }
        Ok(())
    }

    /// Adds the branch-scale penalties of every doped layer to `grads` and
    /// returns the summed penalty.
    pub fn add_regularization(&self, lambda_beta: f64, lambda_alpha: f64, grads: &mut LmGrads) -> Result<f64> {
        let mut total = 0.0;
        for (layer, g) in self.layers.iter().zip(grads.gates.iter_mut()) {
            if let (Some(d), GateGrads::Doped(dg)) = (layer.gate.as_doped(), g) {
                let r = d.regularization(lambda_beta, lambda_alpha)?;
                total += r.loss;
                dg.alpha += r.g_alpha;
                dg.beta += r.g_beta;
            }
        }
        Ok(total)
    }

    pub fn regularization(&self, lambda_beta: f64, lambda_alpha: f64) -> Result<f64> {
        self.layers
            .iter()
            .filter_map(|l| l.gate.as_doped())
            .map(|d| d.regularization(lambda_beta, lambda_alpha).map(|r| r.loss))
            .sum()
    }
}

impl Parameterized for LmModel {
    /// `embedding`, `lstm.{l}.gate.*`, `lstm.{l}.bias`, then (untied only)
    /// `proj.weight`, and `proj.bias`.
    fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = vec![ParamRef {
            name: "embedding".into(),
            shape: vec![self.vocab, self.hidden],
            values: self.embedding.as_slice(),
            mask: None,
            group: ParamGroup::Shared,
            trainable: true,
        }];
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer.gate.named_params(&format!("lstm.{l}.gate")));
            out.push(ParamRef {
                name: format!("lstm.{l}.bias"),
                shape: vec![layer.bias.len()],
                values: &layer.bias,
                mask: None,
                group: ParamGroup::Shared,
                trainable: true,
            });
        }
        if let Some(p) = &self.proj {
            out.push(ParamRef {
                name: "proj.weight".into(),
                shape: vec![p.rows(), p.cols()],
                values: p.as_slice(),
                mask: None,
                group: ParamGroup::Shared,
                trainable: true,
            });
        }
        out.push(ParamRef {
            name: "proj.bias".into(),
            shape: vec![self.vocab],
            values: &self.proj_bias,
            mask: None,
            group: ParamGroup::Shared,
            trainable: true,
        });
        out
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let (vocab, hidden) = (self.vocab, self.hidden);
        let mut out = vec![ParamMut {
            name: "embedding".into(),
            shape: vec![vocab, hidden],
            values: self.embedding.as_mut_slice(),
            mask: None,
            group: ParamGroup::Shared,
            trainable: true,
        }];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.extend(layer.gate.named_params_mut(&format!("lstm.{l}.gate")));
            out.push(ParamMut {
                name: format!("lstm.{l}.bias"),
                shape: vec![layer.bias.len()],
                values: &mut layer.bias,
                mask: None,
                group: ParamGroup::Shared,
                trainable: true,
            });
        }
        if let Some(p) = &mut self.proj {
            out.push(ParamMut {
                name: "proj.weight".into(),
                shape: vec![vocab, hidden],
                values: p.as_mut_slice(),
                mask: None,
                group: ParamGroup::Shared,
                trainable: true,
            });
        }
        out.push(ParamMut {
            name: "proj.bias".into(),
            shape: vec![vocab],
            values: &mut self.proj_bias,
            mask: None,
            group: ParamGroup::Shared,
            trainable: true,
        });
        out
    }
}
