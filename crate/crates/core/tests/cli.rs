//! End-to-end CLI behavior through the in-process entry point: file
//! outputs, determinism, and the exit-code contract.

use std::fs;
use std::path::{Path, PathBuf};

fn run(args: &[&str]) -> i32 {
    evcon::cli::run(args.iter().map(|s| s.to_string()))
}

struct TempDir(PathBuf);

impl TempDir {
    fn new(tag: &str) -> Self {
        let dir = std::env::temp_dir().join(format!(
            "evcon_cli_{tag}_{}_{:?}",
            std::process::id(),
            std::thread::current().id()
        ));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        TempDir(dir)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.0.join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }
}

impl Drop for TempDir {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.0);
    }
}

fn small_config(dir: &TempDir, extra: &str) -> String {
    let text = format!(
        "[graph]\nkind = complete\nn = 2\n\n\
         [protocol]\nkind = linear\nkappa = 5.0\n\n\
         [signals]\nbatch_size = 3\nhorizon = 0.5\nstep = 0.002\nseed = 5\n\n\
         [trigger]\nsigma = 0.1\nepsilon = 0.001\nalpha = 100\nsource = learned\n\n\
         [nn]\nlayer_dims = 2,8,1\ninit_seed = 42\n\n\
         [training]\nlambda = 0.1\nepochs = 5\npretrain_epochs = 30\nthreads = 1\n\n\
         [output]\ndir = {}\n{extra}",
        dir.s("out")
    );
    let path = dir.path("cfg.ini");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn generate_writes_deterministic_files() {
    let dir = TempDir::new("gen");
    let cfg = small_config(&dir, "");
    assert_eq!(
        run(&["generate", "--config", &cfg, "--out", &dir.s("sig_a")]),
        0
    );
    assert_eq!(
        run(&["generate", "--config", &cfg, "--out", &dir.s("sig_b")]),
        0
    );

    let mut names: Vec<_> = fs::read_dir(dir.path("sig_a"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 3);
    for name in &names {
        let a = fs::read(dir.path("sig_a").join(name)).unwrap();
        let b = fs::read(dir.path("sig_b").join(name)).unwrap();
        assert_eq!(a, b, "same seed must produce identical bytes");
    }
    // horizon/step = 250 steps -> 251 data rows + header.
    let first = fs::read_to_string(dir.path("sig_a").join(&names[0])).unwrap();
    assert_eq!(first.lines().count(), 252);
    assert!(first.starts_with("t,r_1,r_2,dr_1,dr_2"));
}

#[test]
fn zero_batch_size_is_a_config_error() {
    let dir = TempDir::new("bad");
    let cfg = small_config(&dir, "");
    let text = fs::read_to_string(&cfg)
        .unwrap()
        .replace("batch_size = 3", "batch_size = 0");
    fs::write(&cfg, text).unwrap();
    assert_eq!(run(&["generate", "--config", &cfg]), 2);
}

#[test]
fn train_with_zero_epochs_keeps_pretrained_weights() {
    let dir = TempDir::new("train0");
    let cfg = small_config(&dir, "");
    assert_eq!(
        run(&["pretrain", "--config", &cfg, "--out", &dir.s("pre.txt")]),
        0
    );

    let text = fs::read_to_string(&cfg)
        .unwrap()
        .replace("epochs = 5", "epochs = 0");
    fs::write(&cfg, text).unwrap();
    assert_eq!(run(&["train", "--config", &cfg]), 0);

    let pre = fs::read_to_string(dir.path("pre.txt")).unwrap();
    let fin = fs::read_to_string(dir.path("out/weights_final.txt")).unwrap();
    assert_eq!(
        pre, fin,
        "zero training epochs must leave pretrained weights"
    );

    let trace = fs::read_to_string(dir.path("out/cost_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1, "trace holds only the header");
}

#[test]
fn train_then_evaluate_round_trip() {
    let dir = TempDir::new("flow");
    let cfg = small_config(&dir, "");
    assert_eq!(run(&["train", "--config", &cfg]), 0);
    let weights = dir.s("out/weights_final.txt");
    assert_eq!(
        run(&[
            "evaluate",
            "--config",
            &cfg,
            "--weights",
            &weights,
            "--sequences",
            "6"
        ]),
        0
    );
    let metrics = fs::read_to_string(dir.path("out/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 7);
    assert!(fs::read_to_string(dir.path("out/summary.txt"))
        .unwrap()
        .contains("guarantee failures: 0"));
}

#[test]
fn evaluate_full_comm_rows_are_neutral() {
    let dir = TempDir::new("fc");
    let cfg = small_config(&dir, "");
    assert_eq!(
        run(&[
            "evaluate",
            "--config",
            &cfg,
            "--full-comm",
            "--sequences",
            "4"
        ]),
        0
    );
    let metrics = fs::read_to_string(dir.path("out/metrics.csv")).unwrap();
    for line in metrics.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let rel: f64 = cols[3].parse().unwrap();
        let comm: f64 = cols[4].parse().unwrap();
        assert_eq!(rel, 0.0);
        assert_eq!(comm, 1.0);
    }
}

#[test]
fn evaluate_fixed_eta_needs_no_weight_file() {
    let dir = TempDir::new("fixed");
    let cfg = small_config(&dir, "");
    assert_eq!(
        run(&[
            "evaluate",
            "--config",
            &cfg,
            "--fixed-eta",
            "0.5",
            "--sequences",
            "4"
        ]),
        0
    );
    // Learned source without weights is rejected up front.
    assert_eq!(run(&["evaluate", "--config", &cfg, "--sequences", "4"]), 2);
}

#[test]
fn weight_dims_must_match_network_spec() {
    let dir = TempDir::new("dims");
    let cfg = small_config(&dir, "");
    assert_eq!(
        run(&["pretrain", "--config", &cfg, "--out", &dir.s("pre.txt")]),
        0
    );
    let text = fs::read_to_string(&cfg)
        .unwrap()
        .replace("2,8,1", "2,4,4,1");
    fs::write(&cfg, text).unwrap();
    assert_eq!(
        run(&["evaluate", "--config", &cfg, "--weights", &dir.s("pre.txt")]),
        2
    );
}

#[test]
fn check_bounds_passes_on_benign_fixture() {
    let dir = TempDir::new("bounds");
    let cfg = small_config(&dir, "");
    assert_eq!(
        run(&[
            "check-bounds",
            "--config",
            &cfg,
            "--fixed-eta",
            "0.5",
            "--adversarial",
            "--sequences",
            "5",
        ]),
        0
    );
    let summary = fs::read_to_string(dir.path("out/bounds_summary.txt")).unwrap();
    assert!(summary.contains("guarantee failures: 0"));
    assert!(dir.path("out/bound_worst.csv").exists());
}

#[test]
fn sweep_produces_weights_and_histograms() {
    let dir = TempDir::new("sweep");
    let cfg = small_config(&dir, "");
    assert_eq!(
        run(&[
            "sweep",
            "--config",
            &cfg,
            "--lambdas",
            "0.001,1",
            "--sequences",
            "4",
        ]),
        0
    );
    assert!(dir.path("out/weights_lambda_0.001.txt").exists());
    assert!(dir.path("out/weights_lambda_1.txt").exists());
    let hist = fs::read_to_string(dir.path("out/sweep_histograms.csv")).unwrap();
    assert!(hist.starts_with("lambda,bin_left,bin_right,count,metric"));
    // 2 lambdas x 2 metrics x 20 bins + header.
    assert_eq!(hist.lines().count(), 81);
    // Histogram mass per lambda and metric equals the batch size.
    let mut mass = std::collections::BTreeMap::new();
    for line in hist.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let key = (cols[0].to_string(), cols[4].to_string());
        *mass.entry(key).or_insert(0usize) += cols[3].parse::<usize>().unwrap();
    }
    assert!(mass.values().all(|&m| m == 4));
}

#[test]
fn unknown_command_and_missing_config_are_usage_errors() {
    assert_eq!(run(&["frobnicate"]), 2);
    assert_eq!(run(&["evaluate"]), 2);
    assert_eq!(run(&["train", "--config", "/definitely/missing.ini"]), 2);
    assert_eq!(run(&[]), 2);
}

#[test]
fn config_file_round_trips_through_save_and_load() {
    let dir = TempDir::new("cfgrt");
    let cfg_path = Path::new(&small_config(&dir, "")).to_path_buf();
    let cfg = evcon::config::RunConfig::load(&cfg_path).unwrap();
    let saved = dir.path("canon.ini");
    cfg.save(&saved).unwrap();
    let reloaded = evcon::config::RunConfig::load(&saved).unwrap();
    assert_eq!(cfg, reloaded);
}
