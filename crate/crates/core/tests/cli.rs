use std::path::{Path, PathBuf};
use std::process::Command;

use darts::cli::{self, Mode, RunConfig, Selector};
use darts::data::load_csv;
use darts::DartsError;

const CONFIG: &str = r#"
out_dir = "out"

[data.synthetic]
n_channels = 4
length = 900
n_drivers = 2
anomaly_kinds = ["spike", "level_shift"]
warmup = 60
seed = 3

[model]
window = 4
history = 16
stride = 2
d_model = 4
heads = 2
head_dim = 4
priors = [0.9, 0.1]

[train]
epochs = 2
batch_size = 8
micro_batch = 8
max_batches_per_epoch = 2
max_validation_samples = 8
seeds = [0, 1]

[score]
stride = 4
"#;

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, CONFIG).unwrap();
    (dir, path)
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_darts"))
}

fn exit_code(args: &[&str]) -> i32 {
    bin().args(args).output().unwrap().status.code().unwrap()
}

fn trained() -> (tempfile::TempDir, RunConfig) {
    let (dir, path) = setup();
    let cfg = RunConfig::load(&path).unwrap();
    cli::train(&cfg).unwrap();
    (dir, cfg)
}

#[test]
fn config_paths_resolve_against_the_file() {
    let (dir, path) = setup();
    let cfg = RunConfig::load(&path).unwrap();
    assert_eq!(cfg.out_dir, dir.path().join("out"));
    assert_eq!(cfg.model.window, 4);
    assert_eq!(cfg.train.seeds, vec![0, 1]);
    let again = RunConfig::from_toml(&cfg.to_toml(), "snapshot").unwrap();
    assert_eq!(again, cfg);
}

#[test]
fn unknown_keys_are_rejected() {
    let err = RunConfig::from_toml("[model]\nwindw = 3\n", "x").unwrap_err();
    assert!(matches!(err, DartsError::Config(_)), "{err}");
    assert_eq!(err.exit_code(), 1);
    let err = RunConfig::from_toml("colour = 1\n", "x").unwrap_err();
    assert!(matches!(err, DartsError::Config(_)));
}

#[test]
fn train_then_eval_writes_the_documented_layout() {
    let (_dir, cfg) = trained();
    let out = &cfg.out_dir;
    for f in ["config.resolved.toml", "history.tsv", "summary.json", "seed0/model.ckpt", "seed1/history.tsv"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let history = std::fs::read_to_string(out.join("history.tsv")).unwrap();
    assert!(history.starts_with("seed\tepoch\ttrain_loss\tval_loss\tval_nll\tlr\n"));
    assert_eq!(history.lines().count(), 1 + 2 * 2);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seeds"].as_array().unwrap().len(), 2);

    let results = cli::score_command(&cfg, out, true).unwrap();
    assert_eq!(results.iter().map(|r| r.0.as_str()).collect::<Vec<_>>(), ["seed0", "seed1"]);
    let mean: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    let f1 = (results[0].1.f1 + results[1].1.f1) / 2.0;
    assert!((mean["f1"].as_f64().unwrap() - f1).abs() < 1e-12);
    for (m, _) in &results {
        assert!(out.join(format!("metrics_{m}.json")).is_file());
        let scores = std::fs::read_to_string(out.join(format!("scores_{m}.csv"))).unwrap();
        assert!(scores.starts_with("# darts-scores v1 first_scored=20\n"));
        // header plus one row per test timestep
        assert_eq!(scores.lines().count(), 2 + 450);
    }
}

#[test]
fn resolved_snapshot_reproduces_the_run() {
    let (dir, cfg) = trained();
    let snap = RunConfig::load(&cfg.out_dir.join("config.resolved.toml")).unwrap();
    let mut snap = snap;
    snap.out_dir = dir.path().join("again");
    snap.train.seeds = vec![1];
    cli::train(&snap).unwrap();
    let a = std::fs::read(cfg.out_dir.join("seed1/model.ckpt")).unwrap();
    let b = std::fs::read(snap.out_dir.join("seed1/model.ckpt")).unwrap();
    assert!(a == b, "checkpoints differ");
}

#[test]
fn fixed_threshold_mode() {
    let (_dir, mut cfg) = trained();
    cfg.score.mode = Mode::Fixed;
    let err = cli::score_command(&cfg, &cfg.out_dir.clone(), true).unwrap_err();
    assert!(matches!(err, DartsError::Config(_)));
    cfg.score.threshold = Some(f64::INFINITY);
    let results = cli::score_command(&cfg, &cfg.out_dir.join("seed0/model.ckpt"), true).unwrap();
    assert_eq!(results.len(), 1);
    assert_eq!(results[0].0, "model");
    assert_eq!(results[0].1.recall, 0.0);
}

#[test]
fn mismatched_checkpoint_is_a_compatibility_error() {
    let (_dir, mut cfg) = trained();
    cfg.model.d_model = 6;
    let err = cli::score_command(&cfg, &cfg.out_dir.clone(), false).unwrap_err();
    assert!(matches!(err, DartsError::Compatibility(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn eval_needs_labels() {
    let (dir, cfg) = trained();
    let data = dir.path().join("data");
    let mut gen = cfg.clone();
    gen.out_dir = data.clone();
    cli::synthetic_command(&gen).unwrap();
    // strip the label column
    let test = load_csv(&data.join("test.csv"), true).unwrap();
    let unlabeled = darts::data::TimeSeriesDataset::new(test.values().to_vec(), test.channel_names().to_vec(), None).unwrap();
    darts::data::write_csv(&data.join("test_unlabeled.csv"), &unlabeled).unwrap();

    let mut cfg = cfg;
    cfg.data.synthetic = None;
    cfg.data.train = Some(data.join("train.csv"));
    cfg.data.test = Some(data.join("test_unlabeled.csv"));
    let err = cli::score_command(&cfg, &cfg.out_dir.clone(), true).unwrap_err();
    assert!(matches!(err, DartsError::Contract(_)), "{err}");
    // score still works and writes no metrics
    let out = dir.path().join("unlabeled");
    cfg.out_dir = out.clone();
    let results = cli::score_command(&cfg, &dir.path().join("out"), false).unwrap();
    assert!(results.is_empty());
    assert!(out.join("scores_seed0.csv").is_file());
    assert!(!out.join("metrics.json").exists());
}

#[test]
fn graph_export() {
    let (_dir, mut cfg) = trained();
    let out = cfg.out_dir.clone();
    std::fs::create_dir_all(out.join("empty")).unwrap();
    let err = cli::export_command(&cfg, &out.join("empty")).unwrap_err();
    assert!(matches!(err, DartsError::Contract(_)), "directory without checkpoints: {err}");

    let picked = cli::export_command(&cfg, &out).unwrap();
    assert_eq!(picked.len(), 2);
    let graphs = out.join("graphs");
    for o in &picked {
        for suffix in ["head0.csv", "head1.csv", "affinity.csv", "scores.csv"] {
            assert!(graphs.join(format!("seed0_origin{o}_{suffix}")).is_file(), "{o} {suffix}");
        }
    }
    let head = std::fs::read_to_string(graphs.join(format!("seed0_origin{}_head0.csv", picked[0]))).unwrap();
    assert!(head.starts_with(&format!("# darts-graph v1 head=0 origin={}\n", picked[0])));

    cfg.export.select = Selector::Origins;
    cfg.export.origins = vec![];
    assert!(matches!(cli::export_command(&cfg, &out).unwrap_err(), DartsError::Contract(_)));
    cfg.export.origins = vec![3];
    assert!(matches!(cli::export_command(&cfg, &out).unwrap_err(), DartsError::Contract(_)));
    cfg.export.origins = vec![16, 40];
    assert_eq!(cli::export_command(&cfg, &out).unwrap(), vec![16, 40]);
}

#[test]
fn noise_and_synthetic_files() {
    let (dir, path) = setup();
    let mut cfg = RunConfig::load(&path).unwrap();
    cfg.out_dir = dir.path().join("gen");
    cli::synthetic_command(&cfg).unwrap();
    // the training split is unlabeled
    let train = load_csv(&cfg.out_dir.join("train.csv"), false).unwrap();
    let test = load_csv(&cfg.out_dir.join("test.csv"), true).unwrap();
    assert_eq!((train.len(), test.len(), train.n_channels()), (450, 450, 4));
    assert!(cfg.out_dir.join("segments.json").is_file());

    let noisy_path = cli::noise_command(&cfg, 0.5).unwrap();
    let noisy = load_csv(&noisy_path, false).unwrap();
    assert_eq!(noisy.len(), train.len());
    assert!(noisy.values() != train.values());
    let clean = cli::noise_command(&cfg, 0.0).unwrap();
    assert_eq!(load_csv(&clean, false).unwrap().values(), train.values());
}

fn run_bin(args: &[&str], out: &Path) -> std::process::Output {
    let o = bin().args(args).output().unwrap();
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    assert!(out.exists());
    o
}

#[test]
fn binary_end_to_end() {
    let (dir, path) = setup();
    let cfg = path.to_str().unwrap();
    let out = dir.path().join("bin_out");
    let out_s = out.to_str().unwrap();
    run_bin(&["train", "--config", cfg, "--out", out_s, "--seed", "4"], &out.join("seed4/model.ckpt"));
    let o = run_bin(&["eval", "--config", cfg, "--out", out_s], &out.join("metrics.json"));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.starts_with("seed4\tprecision "), "{stdout}");
    run_bin(
        &["export-graphs", "--config", cfg, "--out", out_s, "--origin", "20"],
        &out.join("graphs/seed4_origin20_affinity.csv"),
    );
    run_bin(&["inject-noise", "--config", cfg, "--out", out_s, "--ratio", "0.2"], &out.join("train_noisy.csv"));
    let o = run_bin(&["score", "--config", cfg, "--out", out_s, "--mode", "fixed", "--threshold", "1.5"], &out);
    assert!(o.stdout.is_empty());
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("metrics_seed4.json")).unwrap()).unwrap();
    assert_eq!(m["threshold"].as_f64(), Some(1.5));
}

#[test]
fn exit_codes() {
    let (dir, path) = setup();
    let cfg = path.to_str().unwrap();
    assert_eq!(exit_code(&["--help"]), 0);
    assert_eq!(exit_code(&["train", "--bogus"]), 1);
    assert_eq!(exit_code(&["score", "--config", cfg, "--mode", "fixed"]), 1);
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nepochs = 0\n[data.synthetic]\n").unwrap();
    assert_eq!(exit_code(&["train", "--config", bad.to_str().unwrap()]), 1);
    std::fs::write(&bad, "[trainn]\n").unwrap();
    assert_eq!(exit_code(&["train", "--config", bad.to_str().unwrap()]), 1);
    // no checkpoint at the output directory
    let missing = dir.path().join("nothing");
    assert_eq!(exit_code(&["score", "--config", cfg, "--out", missing.to_str().unwrap()]), 2);
    let absent = dir.path().join("absent.toml");
    assert_eq!(exit_code(&["train", "--config", absent.to_str().unwrap()]), 2);
}
