//! End-to-end finite-difference check of a configured model.

use dkpkit_core::config::{Preset, TrainConfig};
use dkpkit_core::data::{Batch, BatchIterator};
use dkpkit_core::nn::{grad_check, GradCheckOptions, GradCheckReport, LmGrads, MaskPlan};
use dkpkit_core::rng::Rng;
use dkpkit_core::train::build_model;
use dkpkit_core::DkpMode;

use crate::error::AppResult;

pub const GATE: f64 = 1e-5;
pub const SYNTHETIC_VOCAB: usize = 11;

/// The tiny model the `gradcheck` subcommand uses when no config is given.
pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        hidden: 8,
        factor: 4.0,
        bptt: 3,
        batch: 2,
        preset: Preset::TwoB,
        base_keep_prob: 0.6,
        init_scale: 0.5,
        ..TrainConfig::default()
    }
}

fn synthetic_batch(cfg: &TrainConfig, vocab: usize, rng: &mut Rng) -> Batch {
    let (batch, len) = (cfg.batch, cfg.bptt);
    let mut inputs = Vec::with_capacity(batch * len);
    let mut targets = Vec::with_capacity(batch * len);
    for _ in 0..batch {
        let row: Vec<usize> = (0..=len).map(|_| (rng.next_u64() % vocab as u64) as usize).collect();
        inputs.extend_from_slice(&row[..len]);
        targets.extend_from_slice(&row[1..]);
    }
    Batch { batch, len, inputs, targets }
}

/// Builds the model `cfg` describes, moves it off its initial point (half
/// pruned random overlay, non-unit branch scales, row dropout at
/// `base_keep_prob` whatever the preset) and compares analytic gradients
/// of loss plus scale penalty with central differences on one batch from a
/// random carried-in state.
///
/// `stream` supplies the batch; without it tokens are drawn at random.
pub fn check_config(cfg: &TrainConfig, vocab: usize, stream: Option<&[usize]>, opts: GradCheckOptions) -> AppResult<GradCheckReport> {
    cfg.validate()?;
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let mut model = build_model(cfg, vocab, 1, &mut rng)?.model;
    for layer in &mut model.layers {
        if let Some(d) = layer.gate.as_doped_mut() {
            let overlay = d.overlay_mut();
            let (values, mask) = overlay.values_and_mask_mut();
            for (v, &m) in values.iter_mut().zip(mask) {
                if m {
                    *v = rng.uniform(-0.3, 0.3);
                }
            }
            overlay.prune_to_sparsity(0.5)?;
            match d.mode() {
                DkpMode::Plain => {}
                DkpMode::BetaScaled => d.set_scales(1.0, 0.7)?,
                DkpMode::AlphaBetaScaled => d.set_scales(1.3, 0.7)?,
            }
            d.set_keep_prob(cfg.base_keep_prob)?;
        }
    }

    let batch = match stream {
        Some(s) => BatchIterator::new(s, cfg.batch, cfg.bptt)?
            .next_batch()
            .expect("a valid iterator yields at least one batch"),
        None => synthetic_batch(cfg, vocab, &mut rng),
    };
    let mut state = model.zero_state(batch.batch);
    for s in state.h.iter_mut().chain(state.c.iter_mut()) {
        s.iter_mut().for_each(|v| *v = rng.uniform(-0.5, 0.5));
    }
    let masks = MaskPlan::draw(&model, batch.batch, batch.len, &mut rng);
    let (lb, la) = if cfg.preset.mode() == DkpMode::Plain {
        (0.0, 0.0)
    } else {
        (cfg.lambda_beta, cfg.lambda_alpha)
    };

    let pass = model.forward(&batch, &state, &masks, true)?;
    let mut grads = LmGrads::zeros_for(&model);
    model.backward(&pass, &mut grads)?;
    model.add_regularization(lb, la, &mut grads)?;
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
    let refs: Vec<&[f64]> = analytic.iter().map(Vec::as_slice).collect();
    let report = grad_check(
        &mut model,
        &refs,
        |m| Ok(m.forward(&batch, &state, &masks, false)?.mean_loss() + m.regularization(lb, la)?),
        opts,
    )?;
    Ok(report)
}
