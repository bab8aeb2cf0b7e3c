//! Acceptance suite: one pass/fail line per criterion.
//!
//! `ACCEPTANCE_ONLY=2,5` restricts the run to the listed criteria.

mod support;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use dkpkit::checkpoint::Checkpoint;
use dkpkit::corpus::Corpus;
use dkpkit::curves::read_curves;
use dkpkit::gradcheck::{check_config, tiny_config, SYNTHETIC_VOCAB};
use dkpkit::run::{run_experiment, CURVES_FILE, FINAL_CKPT, LAST_CKPT};
use dkpkit_core::baselines::CompressionMethod;
use dkpkit_core::config::{Preset, TrainConfig};
use dkpkit_core::data::{Batch, BatchIterator, TokenMode};
use dkpkit_core::dense::DenseMatrix;
use dkpkit_core::kron::{FactorShapes, KronFactorPair};
use dkpkit_core::nn::{GradCheckOptions, LmModel, MaskPlan, Parameterized};
use dkpkit_core::report::CurvePoint;
use dkpkit_core::rng::Rng;
use dkpkit_core::sparse::active_count;
use dkpkit_core::train::{build_model, optimizer_for, Recipe, Trainer};
use dkpkit_core::{BcdPhase, DkpMode, DopedLayer, SparseOverlay};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_dkpkit")
}

fn random_matrix(rng: &mut Rng, r: usize, c: usize, lo: f64, hi: f64) -> DenseMatrix {
    DenseMatrix::from_fn(r, c, |_, _| rng.uniform(lo, hi))
}

// 1 ------------------------------------------------------------------------

fn report_factor(args: &[&str]) -> Result<f64, String> {
    let out = Command::new(bin()).arg("report").args(args).output().map_err(|e| e.to_string())?;
    let text = String::from_utf8_lossy(&out.stdout);
    ensure(out.status.success(), || format!("report {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))?;
    text.lines()
        .find_map(|l| l.strip_prefix("compression factor "))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| format!("no factor in output: {text}"))
}

fn compression_arithmetic() -> Outcome {
    let cases: [(&[&str], f64, f64); 3] = [
        (&["--rows", "100", "--cols", "100", "--kp", "10x10,10x10", "--sparsity", "0.95"], 14.0, 14.5),
        (&["--rows", "100", "--cols", "100", "--kp", "10x10,10x10", "--sparsity", "0.90"], 8.3, 8.4),
        (&["--rows", "2600", "--cols", "1300", "--kp-params", "9980", "--sparsity", "1.0"], 335.0, 342.0),
    ];
    let mut seen = Vec::new();
    for (args, lo, hi) in cases {
        let f = report_factor(args)?;
        ensure((lo..=hi).contains(&f), || format!("factor {f} outside [{lo}, {hi}] for {args:?}"))?;
        seen.push(format!("{f:.3}"));
    }
    Ok(format!("factors {}", seen.join(", ")))
}

// 2 ------------------------------------------------------------------------

fn kron_oracle_equivalence() -> Outcome {
    let mut rng = Rng::seed_from_u64(2024);
    let dim = |rng: &mut Rng| 1 + (rng.next_u64() % 8) as usize;
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (m1, n1, m2, n2) = (dim(&mut rng), dim(&mut rng), dim(&mut rng), dim(&mut rng));
        let b = random_matrix(&mut rng, m1, n1, -2.0, 2.0);
        let c = random_matrix(&mut rng, m2, n2, -2.0, 2.0);
        let x: Vec<f64> = (0..n1 * n2).map(|_| rng.uniform(-2.0, 2.0)).collect();
        // explicit sum over the Kronecker entries
        let mut want = vec![0.0; m1 * m2];
        for i1 in 0..m1 {
            for i2 in 0..m2 {
                for j1 in 0..n1 {
                    for j2 in 0..n2 {
                        want[i1 * m2 + i2] += b.get(i1, j1) * c.get(i2, j2) * x[j1 * n2 + j2];
                    }
                }
            }
        }
        let got = KronFactorPair::new(b, c).map_err(|e| e.to_string())?.matvec(&x).map_err(|e| e.to_string())?;
        worst = got.iter().zip(&want).map(|(g, w)| (g - w).abs()).fold(worst, f64::max);
    }
    ensure(worst < 1e-12, || format!("max abs error {worst:e}"))?;
    Ok(format!("1000 instances, max abs error {worst:.2e}"))
}

// 3 ------------------------------------------------------------------------

fn gradient_gate() -> Outcome {
    let start = Instant::now();
    let report = check_config(&tiny_config(), SYNTHETIC_VOCAB, None, GradCheckOptions::default()).map_err(|e| e.to_string())?;
    for name in [
        "embedding",
        "lstm.0.gate.kp_b",
        "lstm.0.gate.kp_c",
        "lstm.0.gate.overlay",
        "lstm.0.gate.alpha",
        "lstm.0.gate.beta",
        "lstm.0.bias",
        "proj.bias",
    ] {
        ensure(report.get(name).is_some_and(|t| t.checked > 0), || format!("{name} not covered"))?;
    }
    let worst = report.max_rel();
    let secs = start.elapsed().as_secs_f64();
    ensure(worst < 1e-5, || format!("max relative error {worst:e}"))?;
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!("max relative error {worst:.2e} over {} tensors in {secs:.2}s", report.tensors.len()))
}

// 4 ------------------------------------------------------------------------

fn positive_doped_layer(rng: &mut Rng) -> DopedLayer {
    let shapes = FactorShapes { b: (4, 4), c: (8, 4) };
    let kp = KronFactorPair::new(random_matrix(rng, 4, 4, 0.1, 1.0), random_matrix(rng, 8, 4, 0.1, 1.0)).unwrap();
    assert_eq!(kp.factor_shapes(), shapes);
    let mut overlay = SparseOverlay::from_dense(random_matrix(rng, 32, 16, 0.1, 1.0));
    overlay.prune_to_sparsity(0.6).unwrap();
    DopedLayer::new(kp, overlay, DkpMode::AlphaBetaScaled).unwrap().with_scales(1.2, 0.8).unwrap()
}

fn cmr_degeneracy_and_expectation() -> Outcome {
    let mut rng = Rng::seed_from_u64(4);
    let mut layer = positive_doped_layer(&mut rng);
    let x: Vec<f64> = (0..16).map(|_| rng.uniform(0.1, 1.0)).collect();
    let eval = layer.forward_eval(&x).map_err(|e| e.to_string())?;
    let (train, _) = layer.forward(&x, true, &mut rng).map_err(|e| e.to_string())?;
    ensure(train == eval, || "p = 1 training forward differs from eval forward".into())?;

    // same at model level: a p = 1 mask plan is no masking at all
    let cfg = TrainConfig {
        hidden: 8,
        factor: 4.0,
        preset: Preset::Cmr,
        base_keep_prob: 1.0,
        ..TrainConfig::default()
    };
    let model = build_model(&cfg, 11, 10, &mut rng).map_err(|e| e.to_string())?.model;
    let batch = Batch {
        batch: 2,
        len: 3,
        inputs: vec![1, 2, 3, 4, 5, 6],
        targets: vec![2, 3, 4, 5, 6, 7],
    };
    let state = model.zero_state(2);
    let plan = MaskPlan::draw(&model, 2, 3, &mut rng);
    let a = model.forward(&batch, &state, &plan, true).map_err(|e| e.to_string())?;
    let b = model.forward(&batch, &state, &MaskPlan::none(), false).map_err(|e| e.to_string())?;
    ensure(a.loss_sum.to_bits() == b.loss_sum.to_bits(), || "p = 1 model forward differs".into())?;

    let p = 0.7;
    layer.set_keep_prob(p).map_err(|e| e.to_string())?;
    let n = 100_000;
    let mut mean = vec![0.0; eval.len()];
    for _ in 0..n {
        let (y, _) = layer.forward(&x, true, &mut rng).map_err(|e| e.to_string())?;
        mean.iter_mut().zip(&y).for_each(|(m, v)| *m += v / n as f64);
    }
    let worst = mean.iter().zip(&eval).map(|(m, e)| ((m - e) / e).abs()).fold(0.0, f64::max);
    ensure(worst < 0.01, || format!("Monte-Carlo mean off by {:.3}% relative", worst * 100.0))?;
    Ok(format!("p = 1 bit-identical; 1e5-sample mean at p = {p} within {:.3}%", worst * 100.0))
}

// 5 ------------------------------------------------------------------------

fn tiny_stream(bytes: usize, seed: u64) -> (usize, Vec<usize>) {
    let text = support::synthetic_text(bytes, seed);
    let vocab = dkpkit_core::data::Vocab::build(&text, TokenMode::Char, 1).unwrap();
    (vocab.len(), vocab.encode(&text))
}

fn snapshot(model: &LmModel) -> BTreeMap<String, Vec<u64>> {
    model
        .params()
        .into_iter()
        .map(|p| (p.name, p.values.iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn bcd_blocking() -> Outcome {
    let (vocab, stream) = tiny_stream(20_000, 5);
    let cfg = TrainConfig {
        hidden: 16,
        layers: 2,
        factor: 4.0,
        preset: Preset::TwoBBcd,
        bcd_period: Some(3),
        batch: 4,
        bptt: 8,
        ..TrainConfig::default()
    };
    let mut rng = Rng::seed_from_u64(5);
    let built = build_model(&cfg, vocab, 1000, &mut rng).map_err(|e| e.to_string())?;
    let mut batches = BatchIterator::new(&stream, cfg.batch, cfg.bptt).map_err(|e| e.to_string())?;
    let per_epoch = batches.batches_per_epoch();
    // no pruning here, so only the optimizer can touch the overlay
    let mut t = Trainer::new(built.model, optimizer_for(&cfg).unwrap(), None, Recipe::from_config(&cfg, per_epoch), rng);
    let sp = |n: &str| n.ends_with(".overlay") || n.ends_with(".beta");
    let kp = |n: &str| n.ends_with(".kp_b") || n.ends_with(".kp_c") || n.ends_with(".alpha");
    let mut counts = [0usize; 2];
    for _ in 0..12 {
        let before = snapshot(&t.model);
        let batch = batches.next_batch().ok_or("corpus too short")?;
        let step = t.train_batch(&batch).map_err(|e| e.to_string())?;
        let after = snapshot(&t.model);
        let (frozen, moving): (&dyn Fn(&str) -> bool, &dyn Fn(&str) -> bool) = match step.phase {
            Some(BcdPhase::TrainKpOnly) => (&sp, &kp),
            Some(BcdPhase::TrainSpOnly) => (&kp, &sp),
            None => return Err("BCD preset reported no phase".into()),
        };
        counts[(step.phase == Some(BcdPhase::TrainSpOnly)) as usize] += 1;
        for (name, v) in &before {
            if frozen(name) {
                ensure(after[name] == *v, || format!("{name} changed during {:?}", step.phase))?;
            }
        }
        ensure(before.iter().any(|(n, v)| moving(n) && after[n] != *v), || format!("nothing trained in {:?}", step.phase))?;
    }
    ensure(counts[0] > 0 && counts[1] > 0, || format!("phases seen {counts:?}"))?;
    Ok(format!("{} KP-only and {} SP-only steps, blocked branch bit-identical", counts[0], counts[1]))
}

// 6 ------------------------------------------------------------------------

fn oracle_survivors(values: &[f64], sparsity: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));
    let mut keep = vec![false; values.len()];
    for &i in &order[..active_count(values.len(), sparsity)] {
        keep[i] = true;
    }
    keep
}

fn pruning_correctness() -> Outcome {
    let mut rng = Rng::seed_from_u64(6);
    for case in 0..200 {
        let (r, c) = (1 + (rng.next_u64() % 24) as usize, 1 + (rng.next_u64() % 24) as usize);
        // coarse values force ties
        let m = DenseMatrix::from_fn(r, c, |_, _| (rng.uniform(-4.0, 4.0) * 2.0).round() / 2.0);
        let s = rng.next_f64();
        let want = oracle_survivors(m.as_slice(), s);
        let mut o = SparseOverlay::from_dense(m);
        o.prune_to_sparsity(s).map_err(|e| e.to_string())?;
        ensure(o.mask() == want.as_slice(), || format!("case {case}: survivors differ from the sort oracle"))?;
    }

    let (vocab, stream) = tiny_stream(30_000, 6);
    let cfg = TrainConfig {
        hidden: 16,
        factor: 4.0,
        target_sparsity: Some(0.95),
        prune_start: Some(5),
        prune_end: Some(45),
        batch: 4,
        bptt: 8,
        overlay_init: dkpkit_core::config::OverlayInit::Uniform,
        ..TrainConfig::default()
    };
    let built = build_model(&cfg, vocab, 60, &mut rng).map_err(|e| e.to_string())?;
    let schedule = built.schedule.ok_or("no schedule")?;
    let mut batches = BatchIterator::new(&stream, cfg.batch, cfg.bptt).map_err(|e| e.to_string())?;
    let per_epoch = batches.batches_per_epoch();
    let mut t = Trainer::new(built.model, optimizer_for(&cfg).unwrap(), Some(schedule), Recipe::from_config(&cfg, per_epoch), rng);
    let mask = |t: &Trainer| t.model.layers[0].gate.as_doped().unwrap().overlay().mask().to_vec();
    let mut prev = mask(&t);
    for step in 1..=60u64 {
        let batch = batches.next_batch().ok_or("corpus too short")?;
        t.train_batch(&batch).map_err(|e| e.to_string())?;
        let now = mask(&t);
        ensure(prev.iter().zip(&now).all(|(&p, &n)| p || !n), || format!("an entry regrew at step {step}"))?;
        let nnz = now.iter().filter(|&&m| m).count();
        ensure(nnz == active_count(now.len(), schedule.sparsity_at(step)), || {
            format!("step {step}: {nnz} active, schedule wants {}", active_count(now.len(), schedule.sparsity_at(step)))
        })?;
        if step == schedule.end_step {
            ensure(schedule.sparsity_at(step) == 0.95 && nnz == active_count(now.len(), 0.95), || "target missed at end step".into())?;
        }
        prev = now;
    }
    Ok("200 sort-oracle cases exact; mask monotone over 60 steps; 95% reached at the end step".into())
}

// 7 ------------------------------------------------------------------------

const RAMP: (u64, u64) = (700, 850);
const CMA_STEPS: u64 = 1400;
const SEEDS: [u64; 3] = [1, 2, 3];

/// Largest windowed train perplexity during the ramp relative to the
/// smallest one before it, minus one.
fn ramp_rise(curve: &[CurvePoint]) -> f64 {
    let pre = curve.iter().filter(|p| p.step <= RAMP.0).map(|p| p.train_ppl).fold(f64::INFINITY, f64::min);
    let during = curve
        .iter()
        .filter(|p| p.step > RAMP.0 && p.step <= RAMP.1)
        .map(|p| p.train_ppl)
        .fold(f64::NEG_INFINITY, f64::max);
    during / pre - 1.0
}

fn cma_signature(scratch: &Path) -> Outcome {
    let [train, valid, test] = support::write_splits(scratch, 1_000_000, 7);
    let base = TrainConfig {
        train_path: train,
        valid_path: valid,
        test_path: test,
        hidden: 128,
        method: CompressionMethod::Dkp,
        target_sparsity: Some(0.99),
        prune_start: Some(RAMP.0),
        prune_end: Some(RAMP.1),
        bcd_period: Some(100),
        max_steps: CMA_STEPS,
        epochs: 10,
        log_every: 25,
        eval_every: 100,
        eval_tokens: 20_000,
        ..TrainConfig::default()
    };
    let corpus = Corpus::load(&base).map_err(|e| e.to_string())?;
    let mut rise: BTreeMap<(u64, &str), f64> = BTreeMap::new();
    let mut test_ppl: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for seed in SEEDS {
        for preset in Preset::ALL {
            let cfg = TrainConfig { seed, preset, ..base.clone() };
            let started = Instant::now();
            let out = scratch.join(format!("cma-{seed}-{}", preset.name().replace('+', "_")));
            let s = run_experiment(&cfg, &corpus, &out, &mut std::io::sink()).map_err(|e| e.to_string())?;
            let r = ramp_rise(&s.curve);
            let t = s.test_ppl.ok_or("no test perplexity")?;
            println!(
                "    seed {seed} preset {:<7} ramp rise {:>+7.2}%  test ppl {t:.4}  ({:.0}s)",
                preset.name(),
                r * 100.0,
                started.elapsed().as_secs_f64()
            );
            rise.insert((seed, preset.name()), r);
            test_ppl.entry(preset.name()).or_default().push(t);
        }
    }
    let mut problems = Vec::new();
    for seed in SEEDS {
        let (one, cmr) = (rise[&(seed, "1")], rise[&(seed, "CMR")]);
        if one < 0.10 {
            problems.push(format!("seed {seed}: preset 1 rose only {:.2}%", one * 100.0));
        }
        if cmr >= one {
            problems.push(format!("seed {seed}: CMR rose {:.2}% vs preset 1 {:.2}%", cmr * 100.0, one * 100.0));
        }
    }
    let means: Vec<(&str, f64)> = test_ppl.iter().map(|(k, v)| (*k, v.iter().sum::<f64>() / v.len() as f64)).collect();
    let best = means.iter().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    let worst = means.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    let table = means.iter().map(|(k, v)| format!("{k}={v:.4}")).collect::<Vec<_>>().join(" ");
    if best.0 != "CMR" {
        problems.push(format!("best mean test ppl is preset {} not CMR", best.0));
    }
    if worst.0 != "1" {
        problems.push(format!("worst mean test ppl is preset {} not 1", worst.0));
    }
    if problems.is_empty() {
        let rises = SEEDS
            .iter()
            .map(|&s| format!("{:.1}%/{:.1}%", rise[&(s, "1")] * 100.0, rise[&(s, "CMR")] * 100.0))
            .collect::<Vec<_>>()
            .join(" ");
        Ok(format!("rise preset1/CMR per seed {rises}; mean test ppl {table}"))
    } else {
        Err(format!("{}; mean test ppl {table}", problems.join("; ")))
    }
}

// 8 ------------------------------------------------------------------------

fn budget_parity(scratch: &Path) -> Outcome {
    let cfg_path = scratch.join("sweep.cfg");
    fs::write(&cfg_path, "hidden = 650\nsweep_factors = 5, 10, 25\nsweep_methods = dkp, prune, lmf, small\n").map_err(|e| e.to_string())?;
    let out_dir = scratch.join("sweep");
    let status = Command::new(bin())
        .args(["sweep", "--dry-run", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(status.status.success(), || String::from_utf8_lossy(&status.stderr).into_owned())?;
    let mut reader = csv::Reader::from_path(out_dir.join("sweep.csv")).map_err(|e| e.to_string())?;
    let headers = reader.headers().map_err(|e| e.to_string())?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name).ok_or(format!("no {name} column"));
    let (fi, mi, gi, di, si) = (col("factor")?, col("method")?, col("gate_params")?, col("dense_params")?, col("status")?);
    let mut seen = 0;
    let mut worst = 0.0f64;
    for rec in reader.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        let factor: f64 = rec[fi].parse().map_err(|_| "bad factor")?;
        let params: f64 = rec[gi].parse().map_err(|_| "bad gate_params")?;
        let dense: f64 = rec[di].parse().map_err(|_| "bad dense_params")?;
        ensure(dense == 8.0 * 650.0 * 650.0, || format!("dense reference {dense}"))?;
        ensure(&rec[si] == "planned", || format!("{} at {factor}: {}", &rec[mi], &rec[si]))?;
        let target = dense / factor;
        let dev = (params - target).abs() / target;
        ensure(dev <= 0.02, || format!("{} at factor {factor}: {params} params, {:.2}% off", &rec[mi], dev * 100.0))?;
        worst = worst.max(dev);
        seen += 1;
    }
    ensure(seen == 12, || format!("expected 12 rows, got {seen}"))?;
    Ok(format!("12 cells, worst deviation {:.3}%", worst * 100.0))
}

// 9 ------------------------------------------------------------------------

fn serialization_round_trip(scratch: &Path) -> Outcome {
    let [train, valid, test] = support::write_splits(scratch, 40_000, 9);
    let cfg = TrainConfig {
        train_path: train,
        valid_path: valid,
        test_path: test,
        hidden: 16,
        factor: 4.0,
        target_sparsity: Some(0.95),
        preset: Preset::TwoB,
        batch: 4,
        bptt: 10,
        max_steps: 60,
        log_every: 7,
        eval_every: 20,
        ..TrainConfig::default()
    };
    let corpus = Corpus::load(&cfg).map_err(|e| e.to_string())?;
    let out = scratch.join("serial");
    let summary = run_experiment(&cfg, &corpus, &out, &mut std::io::sink()).map_err(|e| e.to_string())?;
    for name in [FINAL_CKPT, LAST_CKPT] {
        let path = out.join(name);
        let bytes = fs::read(&path).map_err(|e| e.to_string())?;
        let again = scratch.join(format!("resaved-{name}"));
        Checkpoint::load(&path).map_err(|e| e.to_string())?.save(&again).map_err(|e| e.to_string())?;
        ensure(fs::read(&again).map_err(|e| e.to_string())? == bytes, || format!("{name} re-save differs"))?;
    }
    let file = fs::File::open(out.join(CURVES_FILE)).map_err(|e| e.to_string())?;
    let parsed = read_curves(file).map_err(|e| e.to_string())?;
    ensure(parsed == summary.curve, || "curves CSV does not parse back to the in-memory log".into())?;
    Ok(format!("checkpoints re-save byte-identical; {} curve rows parse back exactly", parsed.len()))
}

fn main() -> ExitCode {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let scratch = tempfile::tempdir().expect("temp dir");
    let dir = scratch.path();
    let criteria: Vec<(u32, &str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        (1, "compression arithmetic", Box::new(compression_arithmetic)),
        (2, "Kronecker oracle equivalence", Box::new(kron_oracle_equivalence)),
        (3, "gradient gate", Box::new(gradient_gate)),
        (4, "CMR degeneracy and expectation", Box::new(cmr_degeneracy_and_expectation)),
        (5, "BCD blocking", Box::new(bcd_blocking)),
        (6, "pruning correctness", Box::new(pruning_correctness)),
        (7, "CMA signature and preset ordering", Box::new(move || cma_signature(dir))),
        (8, "baseline budget parity", Box::new(move || budget_parity(dir))),
        (9, "serialization round trip", Box::new(move || serialization_round_trip(dir))),
    ];
    let mut failed = 0;
    for (n, name, run) in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(n)) {
            continue;
        }
        let started = Instant::now();
        let outcome = run();
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} {name}: PASS ({detail}) [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} {name}: FAIL ({why}) [{secs:.1}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
