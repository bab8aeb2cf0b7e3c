use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use dkpkit_core::baselines::Budget;
use dkpkit_core::config::TrainConfig;
use dkpkit_core::data::BatchIterator;
use dkpkit_core::nn::LmModel;
use dkpkit_core::report::{bcd_phase_label, CompressionReport, CurvePoint};
use dkpkit_core::rng::Rng;
use dkpkit_core::train::{build_model, compression_report, evaluate, optimizer_for, planned_steps, Recipe, Trainer};

use crate::checkpoint::Checkpoint;
use crate::corpus::Corpus;
use crate::curves::write_curves;
use crate::error::{AppError, AppResult};

pub const CURVES_FILE: &str = "curves.csv";
pub const REPORT_FILE: &str = "report.txt";
pub const FINAL_CKPT: &str = "final.dkpc";
pub const BEST_CKPT: &str = "best.dkpc";
pub const LAST_CKPT: &str = "last.dkpc";

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub curve: Vec<CurvePoint>,
    pub steps: u64,
    pub budget: Budget,
    pub report: CompressionReport,
    pub best_valid_ppl: Option<f64>,
    /// Test perplexity of the best-validation model among those past the
    /// pruning ramp, or of the final model when there is none.
    pub test_ppl: Option<f64>,
}

impl RunSummary {
    pub fn final_train_ppl(&self) -> Option<f64> {
        self.curve.last().map(|p| p.train_ppl)
    }
}

fn valid_ppl(cfg: &TrainConfig, model: &LmModel, corpus: &Corpus) -> AppResult<Option<f64>> {
    corpus
        .valid
        .as_deref()
        .map(|v| evaluate(model, v, cfg.eval_batch, cfg.bptt, cfg.eval_tokens))
        .transpose()
        .map_err(AppError::from)
}

fn write_artifacts(out_dir: &Path, curve: &[CurvePoint], report: &CompressionReport, budget: &Budget) -> AppResult<()> {
    let path = out_dir.join(CURVES_FILE);
    let file = File::create(&path).map_err(|e| AppError::io(&path, e))?;
    write_curves(BufWriter::new(file), curve).map_err(|e| AppError::io(&path, e))?;
    let path = out_dir.join(REPORT_FILE);
    fs::write(&path, format!("budget: {}\n{report}", budget.knob())).map_err(|e| AppError::io(&path, e))
}

/// Trains the configured model on `corpus`, writing curves, a compression
/// report and checkpoints into `out_dir`. Progress lines go to `log`.
///
/// A non-finite loss or gradient stops the run with [`AppError::Numeric`];
/// `last.dkpc` then still holds the most recent finite state.
pub fn run_experiment(cfg: &TrainConfig, corpus: &Corpus, out_dir: &Path, log: &mut dyn Write) -> AppResult<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| AppError::io(out_dir, e))?;
    let mut batches = BatchIterator::new(&corpus.train, cfg.batch, cfg.bptt)?;
    let per_epoch = batches.batches_per_epoch();
    let planned = planned_steps(cfg, per_epoch);
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let built = build_model(cfg, corpus.vocab.len(), planned, &mut rng)?;
    let mut trainer = Trainer::new(
        built.model,
        optimizer_for(cfg)?,
        built.schedule,
        Recipe::from_config(cfg, per_epoch),
        rng,
    );
    let say = |log: &mut dyn Write, line: String| {
        let _ = writeln!(log, "{line}");
    };
    say(
        log,
        format!(
            "method {} preset {} budget {} | {} steps planned, {per_epoch} per epoch, vocab {}",
            cfg.method.name(),
            cfg.preset.name(),
            built.budget.knob(),
            planned,
            corpus.vocab.len()
        ),
    );

    let checkpoint = |t: &Trainer| Checkpoint::capture(cfg, &t.model, &t.optimizer, &t.rng, t.state);
    checkpoint(&trainer).save(&out_dir.join(LAST_CKPT))?;

    let mut curve = Vec::new();
    let mut best: Option<(f64, LmModel)> = None;
    let (mut window_loss, mut window_tokens) = (0.0, 0usize);
    let mut failure = None;
    'epochs: for epoch in 0..cfg.epochs {
        trainer.state.epoch = epoch;
        trainer.reset_state();
        batches.rewind();
        let mut epoch_end = false;
        while !epoch_end {
            if trainer.state.step >= planned {
                break 'epochs;
            }
            let Some(batch) = batches.next_batch() else { break };
            let step = match trainer.train_batch(&batch) {
                Ok(s) => s,
                Err(e) => {
                    failure = Some(AppError::from(e));
                    break 'epochs;
                }
            };
            window_loss += step.loss * step.tokens as f64;
            window_tokens += step.tokens;
            let n = trainer.state.step;
            epoch_end = n % per_epoch as u64 == 0;
            let eval_due = if cfg.eval_every > 0 { n % cfg.eval_every == 0 } else { epoch_end };
            let last = n >= planned;
            if n % cfg.log_every == 0 || eval_due || last || epoch_end {
                let valid = if eval_due || last {
                    match valid_ppl(cfg, &trainer.model, corpus) {
                        Ok(v) => v,
                        Err(e) => {
                            failure = Some(e);
                            break 'epochs;
                        }
                    }
                } else {
                    None
                };
                let point = CurvePoint {
                    epoch,
                    step: n,
                    train_ppl: (window_loss / window_tokens as f64).exp(),
                    valid_ppl: valid,
                    sparsity: trainer.state.sparsity,
                    keep_prob: trainer.state.keep_prob,
                    bcd_phase: step.phase,
                };
                say(
                    log,
                    format!(
                        "epoch {epoch} step {n} train_ppl {:.3} valid_ppl {} sparsity {:.4} keep_prob {:.3} phase {}",
                        point.train_ppl,
                        valid.map_or_else(|| "-".into(), |v| format!("{v:.3}")),
                        point.sparsity,
                        point.keep_prob,
                        bcd_phase_label(point.bcd_phase)
                    ),
                );
                curve.push(point);
                window_loss = 0.0;
                window_tokens = 0;
                if let Some(v) = valid {
                    checkpoint(&trainer).save(&out_dir.join(LAST_CKPT))?;
                    // only models at their compressed size compete
                    if trainer.at_final_size() && best.as_ref().map_or(true, |(b, _)| v < *b) {
                        checkpoint(&trainer).save(&out_dir.join(BEST_CKPT))?;
                        best = Some((v, trainer.model.clone()));
                    }
                }
            }
        }
    }

    let report = compression_report(&trainer.model, cfg.hidden);
    write_artifacts(out_dir, &curve, &report, &built.budget)?;
    if let Some(e) = failure {
        say(log, format!("aborted at step {}: {e}; {LAST_CKPT} keeps the last finite state", trainer.state.step));
        return Err(e);
    }
    checkpoint(&trainer).save(&out_dir.join(FINAL_CKPT))?;
    if corpus.valid.is_none() {
        checkpoint(&trainer).save(&out_dir.join(LAST_CKPT))?;
    }
    let best_valid_ppl = best.as_ref().map(|(v, _)| *v);
    let chosen = best.as_ref().map_or(&trainer.model, |(_, m)| m);
    let test_ppl = corpus
        .test
        .as_deref()
        .map(|t| evaluate(chosen, t, cfg.eval_batch, cfg.bptt, 0))
        .transpose()?;
    if let Some(t) = test_ppl {
        say(log, format!("test perplexity {t:.4}"));
    }
    say(log, report.to_string());
    Ok(RunSummary {
        curve,
        steps: trainer.state.step,
        budget: built.budget,
        report,
        best_valid_ppl,
        test_ppl,
    })
}
