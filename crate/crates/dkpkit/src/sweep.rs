//! Compression sweep: every factor × method (× preset for DKP) at matched
//! gate-parameter budgets, one isolated experiment per cell.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use dkpkit_core::baselines::CompressionMethod;
use dkpkit_core::config::{Preset, TrainConfig};
use dkpkit_core::train::gate_budget;

use crate::corpus::Corpus;
use crate::error::{AppError, AppResult};
use crate::run::run_experiment;

pub const SWEEP_FILE: &str = "sweep.csv";
pub const THREADS_ENV: &str = "DKPKIT_THREADS";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepJob {
    pub factor: f64,
    pub method: CompressionMethod,
    /// Only DKP cells vary the training preset.
    pub preset: Option<Preset>,
}

impl SweepJob {
    pub fn config(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.factor = self.factor;
        cfg.method = self.method;
        cfg.target_sparsity = None;
        if let Some(p) = self.preset {
            cfg.preset = p;
        }
        cfg
    }

    pub fn dir_name(&self) -> String {
        let preset = self.preset.map_or_else(|| "-".into(), |p| p.name().replace('+', "_"));
        format!("{}_{}_{}", self.method.name(), preset, self.factor)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub job: SweepJob,
    pub knob: String,
    /// Gate-matrix parameters summed over layers.
    pub gate_params: usize,
    pub dense_params: usize,
    pub status: String,
    pub valid_ppl: Option<f64>,
    pub test_ppl: Option<f64>,
}

impl SweepRow {
    pub fn achieved_factor(&self) -> f64 {
        self.dense_params as f64 / self.gate_params as f64
    }

    /// Relative distance of the gate parameter count from `dense / factor`.
    pub fn budget_deviation(&self) -> f64 {
        let target = self.dense_params as f64 / self.job.factor;
        (self.gate_params as f64 - target).abs() / target
    }
}

pub fn sweep_jobs(cfg: &TrainConfig) -> Vec<SweepJob> {
    let mut jobs = Vec::new();
    for &factor in &cfg.sweep_factors {
        for &method in &cfg.sweep_methods {
            if method == CompressionMethod::Dkp {
                jobs.extend(cfg.sweep_presets.iter().map(|&p| SweepJob {
                    factor,
                    method,
                    preset: Some(p),
                }));
            } else {
                jobs.push(SweepJob { factor, method, preset: None });
            }
        }
    }
    jobs
}

/// The row a job would produce, from budget arithmetic alone.
pub fn plan_row(base: &TrainConfig, job: SweepJob) -> SweepRow {
    let cfg = job.config(base);
    let (rows, cols) = (4 * cfg.hidden, 2 * cfg.hidden);
    let dense_params = rows * cols * cfg.layers;
    match gate_budget(&cfg) {
        Ok(b) => SweepRow {
            job,
            knob: b.knob(),
            gate_params: b.param_count(rows, cols) * cfg.layers,
            dense_params,
            status: "planned".into(),
            valid_ppl: None,
            test_ppl: None,
        },
        Err(e) => SweepRow {
            job,
            knob: String::new(),
            gate_params: 0,
            dense_params,
            status: format!("infeasible: {e}"),
            valid_ppl: None,
            test_ppl: None,
        },
    }
}

/// Worker count from `DKPKIT_THREADS`, else the available parallelism.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs (or with `corpus = None`, only plans) every job and writes
/// `sweep.csv`. Rows come back in job order whatever the thread count.
pub fn run_sweep(base: &TrainConfig, corpus: Option<&Corpus>, out_dir: &Path, threads: usize) -> AppResult<Vec<SweepRow>> {
    base.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| AppError::io(out_dir, e))?;
    let jobs = sweep_jobs(base);
    let rows: Vec<SweepRow> = match corpus {
        None => jobs.iter().map(|&j| plan_row(base, j)).collect(),
        Some(corpus) => {
            let next = AtomicUsize::new(0);
            let results = Mutex::new(vec![None; jobs.len()]);
            thread::scope(|s| {
                for _ in 0..threads.clamp(1, jobs.len().max(1)) {
                    s.spawn(|| loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        let Some(&job) = jobs.get(i) else { break };
                        let row = run_cell(base, job, corpus, out_dir);
                        results.lock().expect("sweep worker panicked")[i] = Some(row);
                    });
                }
            });
            results
                .into_inner()
                .expect("sweep worker panicked")
                .into_iter()
                .map(|r| r.expect("every job ran"))
                .collect()
        }
    };
    let path = out_dir.join(SWEEP_FILE);
    let file = File::create(&path).map_err(|e| AppError::io(&path, e))?;
    write_sweep_csv(BufWriter::new(file), &rows).map_err(|e| AppError::io(&path, e))?;
    Ok(rows)
}

fn run_cell(base: &TrainConfig, job: SweepJob, corpus: &Corpus, out_dir: &Path) -> SweepRow {
    let mut row = plan_row(base, job);
    if row.status != "planned" {
        return row;
    }
    let dir = out_dir.join(job.dir_name());
    let outcome = fs::create_dir_all(&dir)
        .map_err(|e| AppError::io(&dir, e))
        .and_then(|_| File::create(dir.join("train.log")).map_err(|e| AppError::io(&dir, e)))
        .and_then(|mut log| run_experiment(&job.config(base), corpus, &dir, &mut log));
    match outcome {
        Ok(summary) => {
            row.gate_params = summary.report.total_params();
            row.valid_ppl = summary.best_valid_ppl;
            row.test_ppl = summary.test_ppl;
            row.status = "ok".into();
        }
        Err(e) => row.status = format!("failed: {e}"),
    }
    row
}

pub fn write_sweep_csv<W: std::io::Write>(out: W, rows: &[SweepRow]) -> Result<(), csv::Error> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record([
        "factor",
        "method",
        "preset",
        "knob",
        "gate_params",
        "dense_params",
        "achieved_factor",
        "budget_deviation",
        "valid_ppl",
        "test_ppl",
        "status",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.job.factor.to_string(),
            r.job.method.name().to_string(),
            r.job.preset.map_or_else(String::new, |p| p.name().to_string()),
            r.knob.clone(),
            r.gate_params.to_string(),
            r.dense_params.to_string(),
            r.achieved_factor().to_string(),
            r.budget_deviation().to_string(),
            opt(r.valid_ppl),
            opt(r.test_ppl),
            r.status.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
