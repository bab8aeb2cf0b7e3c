mod support;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dkpkit::checkpoint::Checkpoint;
use dkpkit_core::nn::Parameterized;

fn dkpkit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dkpkit"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A small corpus plus a config that trains on it in well under a second.
fn tiny_setup(dir: &Path, extra: &str) {
    let [train, valid, test] = support::write_splits(dir, 30_000, 3);
    let cfg = format!(
        "train = {train}\nvalid = {valid}\ntest = {test}\nhidden = 12\nfactor = 4\ntarget_sparsity = 0.9\n\
         batch = 4\nbptt = 8\nmax_steps = 40\nlog_every = 5\neval_every = 10\n{extra}"
    );
    fs::write(dir.join("run.cfg"), cfg).unwrap();
}

#[test]
fn malformed_line_is_a_config_error_naming_the_line() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.cfg"), "lr 0.1\n").unwrap();
    let o = dkpkit(dir.path(), &["train", "--config", "bad.cfg"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 1"), "{}", stderr(&o));
}

#[test]
fn unknown_key_and_bad_value_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.cfg"), "# comment\nlearning_rate = 0.1\n").unwrap();
    let o = dkpkit(dir.path(), &["train", "--config", "a.cfg"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"));

    fs::write(dir.path().join("b.cfg"), "base_keep_prob = 1.5\n").unwrap();
    assert_eq!(dkpkit(dir.path(), &["train", "--config", "b.cfg"]).status.code(), Some(1));
}

#[test]
fn missing_files_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(dkpkit(dir.path(), &["train", "--config", "nope.cfg"]).status.code(), Some(3));
    fs::write(dir.path().join("c.cfg"), "train = missing.txt\n").unwrap();
    assert_eq!(dkpkit(dir.path(), &["train", "--config", "c.cfg"]).status.code(), Some(3));
}

#[test]
fn train_without_corpus_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = dkpkit(dir.path(), &["train"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn train_writes_artifacts_and_eval_reproduces_test_perplexity() {
    let dir = tempfile::tempdir().unwrap();
    tiny_setup(dir.path(), "");
    let o = dkpkit(dir.path(), &["train", "--config", "run.cfg", "--out", "out"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["curves.csv", "report.txt", "final.dkpc", "best.dkpc", "last.dkpc"] {
        assert!(dir.path().join("out").join(f).exists(), "{f} missing");
    }
    let text = stdout(&o);
    let test_ppl = text.lines().find_map(|l| l.strip_prefix("final test perplexity: ")).unwrap();

    let o = dkpkit(dir.path(), &["eval", "out/best.dkpc"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), format!("test perplexity: {test_ppl}"));
}

#[test]
fn same_seed_gives_identical_bytes_and_seed_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    tiny_setup(dir.path(), "preset = CMR\n");
    for out in ["a", "b"] {
        assert!(dkpkit(dir.path(), &["train", "--config", "run.cfg", "--out", out]).status.success());
    }
    assert!(dkpkit(dir.path(), &["train", "--config", "run.cfg", "--seed", "9", "--out", "c"]).status.success());
    let read = |p: &str| fs::read(dir.path().join(p)).unwrap();
    for f in ["curves.csv", "final.dkpc", "report.txt"] {
        assert_eq!(read(&format!("a/{f}")), read(&format!("b/{f}")), "{f} differs between identical runs");
    }
    assert_ne!(read("a/final.dkpc"), read("c/final.dkpc"));
}

#[test]
fn divergence_aborts_with_numeric_code_and_keeps_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    tiny_setup(dir.path(), "optimizer = sgd\nmomentum = 0\nlr = 1e300\nclip = 0\n");
    let o = dkpkit(dir.path(), &["train", "--config", "run.cfg", "--out", "out"]);
    assert_eq!(o.status.code(), Some(2), "{}\n{}", stdout(&o), stderr(&o));
    let out = dir.path().join("out");
    assert!(!out.join("final.dkpc").exists());
    let ckpt = Checkpoint::load(&out.join("last.dkpc")).unwrap();
    let (_, model, _, _) = ckpt.restore().unwrap();
    assert!(model.params().iter().all(|p| p.values.iter().all(|v| v.is_finite())));
    assert!(out.join("curves.csv").exists());
}

#[test]
fn gradcheck_passes_on_the_tiny_model() {
    let dir = tempfile::tempdir().unwrap();
    let o = dkpkit(dir.path(), &["gradcheck"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("pass"));
}

#[test]
fn gradcheck_reads_the_corpus_when_configured() {
    let dir = tempfile::tempdir().unwrap();
    tiny_setup(dir.path(), "bptt = 3\nbatch = 2\nhidden = 8\ninit_scale = 0.5\npreset = 2a\n");
    let o = dkpkit(dir.path(), &["gradcheck", "--config", "run.cfg", "--max-entries", "40"]);
    assert!(o.status.success(), "{}", stdout(&o));
}

#[test]
fn usage_errors_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(dkpkit(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(dkpkit(dir.path(), &["report", "--rows", "10"]).status.code(), Some(1));
    assert_eq!(dkpkit(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn sweep_runs_every_cell_and_thread_count_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    tiny_setup(dir.path(), "max_steps = 12\nsweep_factors = 4\nsweep_methods = dkp, lmf, small\nsweep_presets = 1, CMR\n");
    let run = |out: &str, threads: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_dkpkit"))
            .current_dir(dir.path())
            .env("DKPKIT_THREADS", threads)
            .args(["sweep", "--config", "run.cfg", "--out", out])
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read_to_string(dir.path().join(out).join("sweep.csv")).unwrap()
    };
    let one = run("s1", "1");
    let two = run("s2", "2");
    assert_eq!(one, two);
    let rows: Vec<&str> = one.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.ends_with(",ok")), "{one}");
}
