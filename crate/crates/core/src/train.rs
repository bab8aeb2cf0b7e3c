//! Model construction from a [`TrainConfig`] and the per-batch training step.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::baselines::{budget_match_with, Budget, CompressionMethod, LowRankPair, PrunedDense};
use crate::config::{OptimizerChoice, OverlayInit, Preset, TrainConfig};
use crate::data::{Batch, BatchIterator};
use crate::dense::DenseMatrix;
use crate::dkp::{bcd_gate, cmr_keep_prob, BcdPhase, DopedLayer};
use crate::error::{Error, Result};
use crate::kron::{select_factor_shapes, KronFactorPair};
use crate::nn::{GateLayer, LmGrads, LmModel, LstmLayer, LstmState, MaskPlan, Optimizer, OptimizerKind, ParamGroup};
use crate::report::{CompressionReport, LayerCounts};
use crate::rng::Rng;
use crate::sparse::{active_count, PruneSchedule, SparseOverlay};

/// A freshly initialized model plus what was derived to build it.
#[derive(Clone, Debug)]
pub struct BuiltModel {
    pub model: LmModel,
    pub budget: Budget,
    pub schedule: Option<PruneSchedule>,
}

/// Default pruning window: 10% to 60% of the planned steps.
pub fn default_prune_window(planned_steps: u64) -> (u64, u64) {
    let start = planned_steps / 10;
    let end = (planned_steps * 6 / 10).max(start + 1);
    (start, end)
}

/// Steps a run of `cfg` takes over a corpus with `batches_per_epoch`.
pub fn planned_steps(cfg: &TrainConfig, batches_per_epoch: usize) -> u64 {
    let full = cfg.epochs as u64 * batches_per_epoch as u64;
    if cfg.max_steps > 0 {
        full.min(cfg.max_steps)
    } else {
        full
    }
}

/// The parameter budget `cfg` implies for one `4h × 2h` gate matrix.
pub fn gate_budget(cfg: &TrainConfig) -> Result<Budget> {
    let (rows, cols) = (4 * cfg.hidden, 2 * cfg.hidden);
    let dense = rows * cols;
    match (cfg.method, cfg.target_sparsity) {
        (CompressionMethod::Dkp, Some(s)) => {
            let shapes = match cfg.kp_shapes {
                Some(sh) => sh,
                None => select_factor_shapes(rows, cols)?,
            };
            Ok(Budget::Dkp {
                shapes,
                overlay_nnz: active_count(dense, s),
                sparsity: s,
            })
        }
        (CompressionMethod::Prune, Some(s)) => Ok(Budget::Prune {
            nnz: active_count(dense, s),
            sparsity: s,
        }),
        _ => budget_match_with(cfg.factor, rows, cols, cfg.method, cfg.kp_shapes),
    }
}

/// Builds the model `cfg` describes for a vocabulary of `vocab` tokens.
pub fn build_model(cfg: &TrainConfig, vocab: usize, planned_steps: u64, rng: &mut Rng) -> Result<BuiltModel> {
    if vocab < 2 {
        return Err(Error::InvalidArgument(format!("vocabulary of {vocab} is too small")));
    }
    let budget = gate_budget(cfg)?;
    let hidden = match budget {
        Budget::Small { hidden } => hidden,
        _ => cfg.hidden,
    };
    if hidden == 0 {
        return Err(Error::Infeasible("compressed hidden size is zero".into()));
    }
    let scale = cfg.init_scale;
    let (start, end) = match (cfg.prune_start, cfg.prune_end) {
        (Some(s), Some(e)) => (s, e),
        (s, e) => {
            let (ds, de) = default_prune_window(planned_steps);
            let s = s.unwrap_or(ds);
            (s, e.unwrap_or(de.max(s + 1)))
        }
    };
    let schedule = match budget {
        Budget::Dkp { sparsity, .. } | Budget::Prune { sparsity, .. } => {
            Some(PruneSchedule::new(sparsity, start, end, cfg.prune_exponent)?)
        }
        _ => None,
    };

    let uniform = |rng: &mut Rng, r: usize, c: usize| DenseMatrix::from_fn(r, c, |_, _| rng.uniform(-scale, scale));
    let embedding = uniform(rng, vocab, hidden);
    let mut layers = Vec::with_capacity(cfg.layers);
    for _ in 0..cfg.layers {
        let (rows, cols) = (4 * hidden, 2 * hidden);
        let gate = match budget {
            Budget::Dense | Budget::Small { .. } => GateLayer::Dense(uniform(rng, rows, cols)),
            Budget::Dkp { shapes, .. } => {
                let kp = KronFactorPair::random(shapes, scale, rng)?;
                let overlay = match cfg.overlay_init {
                    OverlayInit::Zero => SparseOverlay::zeros(rows, cols),
                    OverlayInit::Uniform => SparseOverlay::from_dense(uniform(rng, rows, cols)),
                };
                GateLayer::Doped(DopedLayer::new(kp, overlay, cfg.preset.mode())?)
            }
            Budget::Prune { .. } => GateLayer::Pruned(PrunedDense::new(
                uniform(rng, rows, cols),
                schedule.expect("prune budget has a schedule"),
            )),
            Budget::Lmf { rank } => GateLayer::LowRank(LowRankPair::random(rows, cols, rank, scale, rng)?),
        };
        layers.push(LstmLayer::new(gate, LstmLayer::default_bias(hidden))?);
    }
    let proj = if cfg.tie_weights { None } else { Some(uniform(rng, vocab, hidden)) };
    let model = LmModel::new(embedding, layers, proj, vec![0.0; vocab])?;
    Ok(BuiltModel { model, budget, schedule })
}

/// Gate-matrix parameter accounting against a dense `4h × 2h` reference.
pub fn compression_report(model: &LmModel, reference_hidden: usize) -> CompressionReport {
    let dense = 8 * reference_hidden * reference_hidden;
    let layers = model
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let mut counts = LayerCounts {
                name: format!("lstm.{l}.gate"),
                dense_params: dense,
                kp_params: 0,
                sparse_nnz: 0,
                other_params: 0,
            };
            match &layer.gate {
                GateLayer::Doped(d) => {
                    counts.kp_params = d.kp().param_count();
                    counts.sparse_nnz = d.overlay().nnz();
                }
                GateLayer::Pruned(p) => counts.sparse_nnz = p.weights().nnz(),
                other => counts.other_params = other.param_count(),
            }
            counts
        })
        .collect();
    CompressionReport::new(layers)
}

/// Overlay or pruned-weight sparsity of the first compressed layer.
pub fn model_sparsity(model: &LmModel) -> f64 {
    model
        .layers
        .iter()
        .find_map(|l| match &l.gate {
            GateLayer::Doped(d) => Some(d.overlay().sparsity()),
            GateLayer::Pruned(p) => Some(p.weights().sparsity()),
            _ => None,
        })
        .unwrap_or(0.0)
}

pub fn optimizer_for(cfg: &TrainConfig) -> Result<Optimizer> {
    let kind = match cfg.optimizer {
        OptimizerChoice::Sgd => OptimizerKind::sgd(cfg.lr, cfg.momentum),
        OptimizerChoice::Adam => OptimizerKind::adam(cfg.lr),
    };
    Optimizer::new(kind, (cfg.clip > 0.0).then_some(cfg.clip))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub epoch: u32,
    pub sparsity: f64,
    pub keep_prob: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Mean cross-entropy of the batch, without regularization.
    pub loss: f64,
    pub tokens: usize,
    pub phase: Option<BcdPhase>,
    pub grad_norm: f64,
    pub pruned: bool,
}

/// Training-recipe knobs the trainer applies each step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Recipe {
    pub preset: Preset,
    pub bcd_period: u64,
    pub base_keep_prob: f64,
    pub lambda_alpha: f64,
    pub lambda_beta: f64,
}

impl Recipe {
    pub fn from_config(cfg: &TrainConfig, batches_per_epoch: usize) -> Self {
        Self {
            preset: cfg.preset,
            bcd_period: cfg.bcd_period.unwrap_or(batches_per_epoch.max(1) as u64),
            base_keep_prob: cfg.base_keep_prob,
            lambda_alpha: cfg.lambda_alpha,
            lambda_beta: cfg.lambda_beta,
        }
    }
}

pub struct Trainer {
    pub model: LmModel,
    pub optimizer: Optimizer,
    pub state: TrainState,
    pub rng: Rng,
    pub schedule: Option<PruneSchedule>,
    pub recipe: Recipe,
    carried: Option<LstmState>,
    grads: LmGrads,
}

impl Trainer {
    pub fn new(model: LmModel, optimizer: Optimizer, schedule: Option<PruneSchedule>, recipe: Recipe, rng: Rng) -> Self {
        let grads = LmGrads::zeros_for(&model);
        let state = TrainState {
            step: 0,
            epoch: 0,
            sparsity: model_sparsity(&model),
            keep_prob: 1.0,
        };
        Self {
            model,
            optimizer,
            state,
            rng,
            schedule,
            recipe,
            carried: None,
            grads,
        }
    }

    /// Drops the carried hidden state, e.g. at an epoch boundary.
    pub fn reset_state(&mut self) {
        self.carried = None;
    }

    /// Whether pruning has reached its final sparsity, so the model is at
    /// its compressed size.
    pub fn at_final_size(&self) -> bool {
        self.schedule.map_or(true, |s| self.state.step >= s.end_step)
    }

    pub fn bcd_phase(&self) -> Option<BcdPhase> {
        self.recipe.preset.bcd().then(|| bcd_gate(self.state.step, self.recipe.bcd_period))
    }

    fn current_keep_prob(&self) -> f64 {
        match (self.recipe.preset.cmr(), self.schedule) {
            (true, Some(s)) => cmr_keep_prob(self.recipe.base_keep_prob, self.state.sparsity, s.target_sparsity),
            (true, None) => self.recipe.base_keep_prob,
            _ => 1.0,
        }
    }

    /// One optimizer step on `batch`, continuing from the carried state.
    pub fn train_batch(&mut self, batch: &Batch) -> Result<StepReport> {
        let p = self.current_keep_prob();
        for layer in &mut self.model.layers {
            if let Some(d) = layer.gate.as_doped_mut() {
                if d.keep_prob() != p {
                    d.set_keep_prob(p)?;
                }
            }
        }
        self.state.keep_prob = p;

        let masks = if p < 1.0 {
            MaskPlan::draw(&self.model, batch.batch, batch.len, &mut self.rng)
        } else {
            MaskPlan::none()
        };
        let start = match self.carried.take() {
            Some(s) if s.batch(self.model.hidden()) == batch.batch => s,
            _ => self.model.zero_state(batch.batch),
        };
        let pass = self.model.forward(batch, &start, &masks, true)?;
        self.grads.zero();
        self.model.backward(&pass, &mut self.grads)?;
        if self.recipe.preset.mode() != crate::dkp::DkpMode::Plain {
            self.model
                .add_regularization(self.recipe.lambda_beta, self.recipe.lambda_alpha, &mut self.grads)?;
        }

        let phase = self.bcd_phase();
        let blocked = phase.map(|ph| match ph {
            BcdPhase::TrainKpOnly => ParamGroup::Sp,
            BcdPhase::TrainSpOnly => ParamGroup::Kp,
        });
        let stats = self.optimizer.step(&mut self.model, &self.grads.tensors(), blocked)?;
        self.state.step += 1;
        let pruned = self.prune_to_schedule()?;
        self.state.sparsity = model_sparsity(&self.model);
        self.carried = Some(pass.final_state.clone());
        Ok(StepReport {
            loss: pass.mean_loss(),
            tokens: pass.tokens,
            phase,
            grad_norm: stats.grad_norm,
            pruned,
        })
    }

    /// Prunes every compressed layer whenever the schedule at the current
    /// step asks for at least one fewer active entry.
    pub fn prune_to_schedule(&mut self) -> Result<bool> {
        let Some(schedule) = self.schedule else {
            return Ok(false);
        };
        let s = schedule.sparsity_at(self.state.step);
        let mut pruned = false;
        for layer in &mut self.model.layers {
            let needs = |o: &SparseOverlay| active_count(o.len(), s) < o.nnz();
            match &mut layer.gate {
                GateLayer::Doped(d) if needs(d.overlay()) => {
                    d.overlay_mut().prune_to_sparsity(s)?;
                    pruned = true;
                }
                GateLayer::Pruned(pd) if needs(pd.weights()) => {
                    pd.weights_mut().prune_to_sparsity(s)?;
                    pruned = true;
                }
                _ => {}
            }
        }
        Ok(pruned)
    }
}

/// Perplexity of `model` on `stream` in evaluation mode, reading at most
/// `max_tokens` targets when nonzero.
pub fn evaluate(model: &LmModel, stream: &[usize], batch: usize, bptt: usize, max_tokens: usize) -> Result<f64> {
    let stream = if max_tokens > 0 && stream.len() > max_tokens + batch {
        &stream[..max_tokens + batch]
    } else {
        stream
    };
    let batch = batch.min(stream.len() / 2).max(1);
    let mut it = BatchIterator::new(stream, batch, bptt)?;
    let mut state = model.zero_state(batch);
    let (mut loss, mut tokens) = (0.0, 0usize);
    while let Some(b) = it.next_batch() {
        let pass = model.forward(&b, &state, &MaskPlan::none(), false)?;
        loss += pass.loss_sum;
        tokens += pass.tokens;
        state = pass.final_state;
    }
    let ppl = libm::exp(loss / tokens as f64);
    if !ppl.is_finite() {
        return Err(Error::NonFinite("evaluation perplexity".into()));
    }
    Ok(ppl)
}
