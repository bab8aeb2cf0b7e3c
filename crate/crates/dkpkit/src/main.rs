use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dkpkit_core::config::TrainConfig;
use dkpkit_core::kron::{select_factor_shapes, FactorShapes};
use dkpkit_core::nn::GradCheckOptions;
use dkpkit_core::report::{compression_factor_from_counts, update_ratio};
use dkpkit_core::sparse::active_count;
use dkpkit_core::train::evaluate;

use dkpkit::checkpoint::Checkpoint;
use dkpkit::corpus::Corpus;
use dkpkit::gradcheck::{check_config, tiny_config, GATE, SYNTHETIC_VOCAB};
use dkpkit::run::run_experiment;
use dkpkit::sweep::{run_sweep, thread_count};
use dkpkit::{AppError, AppResult};

/// Doped Kronecker-product compression of LSTM language models.
#[derive(Parser, Debug)]
#[command(name = "dkpkit", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "dkpkit-out")]
    out: PathBuf,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model and write curves, report and checkpoints.
    Train,
    /// Perplexity of a checkpoint on the validation or test split.
    Eval {
        checkpoint: PathBuf,
        #[arg(long, default_value = "test", value_parser = ["valid", "test", "train"])]
        split: String,
    },
    /// Finite-difference gradient check; fails above the 1e-5 gate.
    Gradcheck {
        /// Entries sampled per tensor.
        #[arg(long)]
        max_entries: Option<usize>,
    },
    /// Compression arithmetic without training.
    Report(ReportArgs),
    /// Train (or plan) every factor × method × preset cell.
    Sweep {
        /// Only compute the matched budgets.
        #[arg(long)]
        dry_run: bool,
    },
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long, requires = "cols")]
    rows: Option<usize>,
    #[arg(long, requires = "rows")]
    cols: Option<usize>,
    /// Factor shapes `m1xn1,m2xn2`, or `auto`.
    #[arg(long, conflicts_with = "kp_params")]
    kp: Option<String>,
    /// Kronecker parameter count, instead of shapes.
    #[arg(long)]
    kp_params: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    sparsity: f64,
}

fn load_config(common: &Common, fallback: TrainConfig) -> AppResult<TrainConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
            TrainConfig::parse(&text).map_err(|e| AppError::Config(format!("{}: {e}", path.display())))?
        }
        None => fallback,
    };
    for o in &common.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| AppError::Config(format!("override `{o}` is not KEY=VALUE")))?;
        cfg.set_key(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(common: &Common) -> AppResult<()> {
    let cfg = load_config(common, TrainConfig::default())?;
    let corpus = Corpus::load(&cfg)?;
    let summary = run_experiment(&cfg, &corpus, &common.out, &mut io::stdout())?;
    match summary.test_ppl {
        Some(t) => println!("final test perplexity: {t:.4}"),
        None => println!("no test split configured"),
    }
    Ok(())
}

fn eval(common: &Common, checkpoint: &Path, split: &str) -> AppResult<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (saved, model, _, _) = ckpt.restore()?;
    let cfg = if common.config.is_some() || !common.overrides.is_empty() {
        load_config(common, saved)?
    } else {
        saved
    };
    let corpus = Corpus::load(&cfg)?;
    if corpus.vocab.len() != model.vocab() {
        return Err(AppError::Config(format!(
            "corpus vocabulary has {} tokens, checkpoint expects {}",
            corpus.vocab.len(),
            model.vocab()
        )));
    }
    let stream = match split {
        "train" => Some(&corpus.train),
        "valid" => corpus.valid.as_ref(),
        _ => corpus.test.as_ref(),
    }
    .ok_or_else(|| AppError::Config(format!("no {split} split configured")))?;
    let ppl = evaluate(&model, stream, cfg.eval_batch, cfg.bptt, 0)?;
    println!("{split} perplexity: {ppl:.4}");
    Ok(())
}

fn gradcheck(common: &Common, max_entries: Option<usize>) -> AppResult<bool> {
    let cfg = load_config(common, tiny_config())?;
    let corpus = if cfg.train_path.is_empty() { None } else { Some(Corpus::load(&cfg)?) };
    let vocab = corpus.as_ref().map_or(SYNTHETIC_VOCAB, |c| c.vocab.len());
    let opts = GradCheckOptions {
        max_entries,
        ..GradCheckOptions::default()
    };
    let report = check_config(&cfg, vocab, corpus.as_ref().map(|c| c.train.as_slice()), opts)?;
    let mut out = io::stdout().lock();
    for t in &report.tensors {
        let verdict = if t.max_rel < GATE { "ok" } else { "FAIL" };
        let _ = writeln!(out, "{:<24} {:>6} max_rel {:.3e} mean_rel {:.3e} {verdict}", t.name, t.checked, t.max_rel, t.mean_rel);
    }
    let ok = report.passes(GATE);
    let _ = writeln!(out, "max relative error {:.3e} (gate {GATE:e}): {}", report.max_rel(), if ok { "pass" } else { "fail" });
    Ok(ok)
}

fn report(common: &Common, args: &ReportArgs) -> AppResult<()> {
    let (Some(rows), Some(cols)) = (args.rows, args.cols) else {
        let cfg = load_config(common, TrainConfig::default())?;
        let row = dkpkit::sweep::plan_row(
            &cfg,
            dkpkit::sweep::SweepJob {
                factor: cfg.factor,
                method: cfg.method,
                preset: Some(cfg.preset),
            },
        );
        println!("method {} budget {} status {}", cfg.method.name(), row.knob, row.status);
        println!(
            "gate params {} of {} dense: factor {:.3}, deviation {:.4}",
            row.gate_params,
            row.dense_params,
            row.achieved_factor(),
            row.budget_deviation()
        );
        return Ok(());
    };
    if !(0.0..=1.0).contains(&args.sparsity) {
        return Err(AppError::Config(format!("sparsity {} outside [0, 1]", args.sparsity)));
    }
    let kp_params = match (args.kp_params, args.kp.as_deref()) {
        (Some(n), _) => n,
        (None, None | Some("auto")) => select_factor_shapes(rows, cols)?.param_count(),
        (None, Some(text)) => {
            let mut probe = TrainConfig::default();
            probe.set_key("kp_shapes", text)?;
            let shapes: FactorShapes = probe.kp_shapes.expect("explicit shapes parse to Some");
            if shapes.product_shape() != (rows, cols) {
                return Err(AppError::Config(format!(
                    "factors {text} give {:?}, not {rows}x{cols}",
                    shapes.product_shape()
                )));
            }
            shapes.param_count()
        }
    };
    let dense = rows * cols;
    println!("dense {rows}x{cols} = {dense} params, kp {kp_params} params, overlay sparsity {}", args.sparsity);
    println!("compression factor {:.4}", compression_factor_from_counts(dense, kp_params, args.sparsity));
    let nnz = active_count(dense, args.sparsity);
    println!("with one index per sparse value {:.4}", dense as f64 / (kp_params + 2 * nnz) as f64);
    println!("dense overlay updates {:.2}x the kp branch", update_ratio(dense, kp_params));
    Ok(())
}

fn sweep(common: &Common, dry_run: bool) -> AppResult<()> {
    let cfg = load_config(common, TrainConfig::default())?;
    let corpus = if dry_run { None } else { Some(Corpus::load(&cfg)?) };
    let rows = run_sweep(&cfg, corpus.as_ref(), &common.out, thread_count())?;
    for r in &rows {
        println!(
            "{:<6} {:<6} {:<7} {:>10} params  factor {:>8.3}  dev {:.4}  {}",
            r.job.factor,
            r.job.method.name(),
            r.job.preset.map_or("-", |p| p.name()),
            r.gate_params,
            r.achieved_factor(),
            r.budget_deviation(),
            r.status
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage mistakes are configuration errors
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Train => train(&cli.common),
        Command::Eval { checkpoint, split } => eval(&cli.common, checkpoint, split),
        Command::Gradcheck { max_entries } => match gradcheck(&cli.common, *max_entries) {
            Ok(true) => Ok(()),
            Ok(false) => Err(AppError::Numeric("gradient check above the gate".into())),
            Err(e) => Err(e),
        },
        Command::Report(args) => report(&cli.common, args),
        Command::Sweep { dry_run } => sweep(&cli.common, *dry_run),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dkpkit: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
