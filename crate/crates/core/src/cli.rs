//! Command-line front end.
//!
//! Every command reads one TOML run configuration (all keys optional, unknown
//! keys rejected); flags override individual values. Relative paths in the
//! file resolve against the file's directory.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, inject_noise, load_csv, make_samples, write_csv, SyntheticSpec, TimeSeriesDataset};
use crate::error::{DartsError, Result};
use crate::model::{Darts, ModelConfig};
use crate::pipeline::{score_and_evaluate, train_seed, Prepared};
use crate::scoring::export::{capture_graphs, save_scores, save_snapshot, write_scores, MetricsFile};
use crate::scoring::{Metrics, ThresholdMode};
use crate::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Whether the training file has a trailing label column.
    pub train_labels: bool,
    pub test_labels: bool,
    /// Used when no files are given.
    pub synthetic: Option<SyntheticSpec>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    BestF1,
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreConfig {
    /// Step between scored target windows; 1 averages every covering window.
    pub stride: usize,
    pub mode: Mode,
    pub threshold: Option<f64>,
    /// Samples per inference pass.
    pub chunk: usize,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            stride: 1,
            mode: Mode::BestF1,
            threshold: None,
            chunk: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    /// Exactly the configured origins.
    Origins,
    /// The first test sample whose target is normal and the first that overlaps an anomaly.
    #[default]
    NormalAndAnomalous,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExportConfig {
    pub select: Selector,
    pub origins: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub ratio: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { ratio: 0.5, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub score: ScoreConfig,
    pub export: ExportConfig,
    pub noise: NoiseConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            score: ScoreConfig::default(),
            export: ExportConfig::default(),
            noise: NoiseConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, source: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| DartsError::config(format!("{source}: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DartsError::io(path, e))?;
        let mut cfg = Self::from_toml(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.out_dir);
        cfg.data.train.as_mut().map(resolve);
        cfg.data.test.as_mut().map(resolve);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.score.stride == 0 || self.score.stride > self.model.window {
            return Err(DartsError::config(format!(
                "score.stride must be in 1..={}",
                self.model.window
            )));
        }
        if self.score.chunk == 0 {
            return Err(DartsError::config("score.chunk must be positive"));
        }
        if self.data.train.is_none() && self.data.synthetic.is_none() {
            return Err(DartsError::config("set data.train (and data.test) or data.synthetic"));
        }
        Ok(())
    }

    fn threshold_mode(&self) -> Result<ThresholdMode> {
        match (self.score.mode, self.score.threshold) {
            (Mode::BestF1, _) => Ok(ThresholdMode::BestF1),
            (Mode::Fixed, Some(t)) => Ok(ThresholdMode::Fixed(t)),
            (Mode::Fixed, None) => Err(DartsError::config("fixed mode needs a threshold")),
        }
    }

    /// Raw (unstandardized) train and test series.
    pub fn load_data(&self) -> Result<(TimeSeriesDataset, TimeSeriesDataset)> {
        match (&self.data.train, &self.data.synthetic) {
            (Some(train), _) => {
                let tr = load_csv(train, self.data.train_labels)?;
                let test = self
                    .data
                    .test
                    .as_ref()
                    .ok_or_else(|| DartsError::config("data.test is required with data.train"))?;
                Ok((tr, load_csv(test, self.data.test_labels)?))
            }
            (None, Some(spec)) => {
                let s = generate_synthetic(spec)?;
                Ok((s.train, s.test))
            }
            (None, None) => Err(DartsError::config("no data source configured")),
        }
    }

    fn load_test(&self) -> Result<TimeSeriesDataset> {
        match (&self.data.test, &self.data.synthetic) {
            (Some(test), _) => load_csv(test, self.data.test_labels),
            _ => Ok(self.load_data()?.1),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "darts", version, about = "Dual-path graph anomaly detection for multichannel time series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, overriding `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, clap::Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint file, or a training output directory holding one per seed.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model per seed.
    Train(Common),
    /// Write anomaly scores for the test series (plus metrics when labeled).
    Score(ScoreArgs),
    /// Score and evaluate a labeled test series.
    Eval(ScoreArgs),
    /// Write learned graphs, temporal affinities and channel scores for selected samples.
    ExportGraphs {
        #[command(flatten)]
        args: ScoreArgs,
        /// Sample origins (test timesteps); repeats allowed.
        #[arg(long = "origin")]
        origins: Vec<usize>,
    },
    /// Write a copy of the training series with Gaussian noise added.
    InjectNoise {
        #[command(flatten)]
        common: Common,
        /// Noise standard deviation relative to each channel's.
        #[arg(long)]
        ratio: Option<f64>,
    },
    /// Write the configured synthetic dataset as CSV files.
    GenerateSynthetic(Common),
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.train.seeds = vec![seed];
        cfg.noise.seed = seed;
    }
    Ok(cfg)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| DartsError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| DartsError::io(path, e))
}

/// Writes `config.resolved.toml` into the output directory.
fn snapshot(cfg: &RunConfig) -> Result<()> {
    create_dir(&cfg.out_dir)?;
    write_text(&cfg.out_dir.join("config.resolved.toml"), &cfg.to_toml())
}

#[derive(Serialize)]
struct SeedSummary {
    seed: u64,
    epochs_run: usize,
    best_epoch: usize,
    best_val_loss: f64,
    checkpoint: PathBuf,
}

#[derive(Serialize)]
struct TrainSummary {
    format: &'static str,
    seeds: Vec<SeedSummary>,
    mean_best_val_loss: f64,
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    snapshot(cfg)?;
    let (train, test) = cfg.load_data()?;
    let prepared = Prepared::new(&train, &test)?;
    let mut aggregate = String::from("seed\tepoch\ttrain_loss\tval_loss\tval_nll\tlr\n");
    let mut seeds = Vec::new();
    for &seed in &cfg.train.seeds {
        let dir = cfg.out_dir.join(format!("seed{seed}"));
        create_dir(&dir)?;
        let run = train_seed(&prepared.train, &cfg.model, &cfg.train, seed, cfg.score.stride, |r| {
            eprintln!(
                "seed {seed} epoch {:>3}  train {:.4}  val {:.4}  lr {:.2e}",
                r.epoch, r.train_loss, r.val_loss, r.lr
            )
        })?;
        let ckpt = dir.join("model.ckpt");
        run.model.save(&ckpt)?;
        run.report.save_history(&dir.join("history.tsv"))?;
        let mut own = Vec::new();
        run.report.write_history(&mut own).expect("in-memory write");
        for line in String::from_utf8(own).expect("ascii").lines().skip(1) {
            aggregate.push_str(&format!("{seed}\t{line}\n"));
        }
        seeds.push(SeedSummary {
            seed,
            epochs_run: run.report.history.len(),
            best_epoch: run.report.best_epoch,
            best_val_loss: run.report.best_val_loss,
            checkpoint: ckpt,
        });
    }
    write_text(&cfg.out_dir.join("history.tsv"), &aggregate)?;
    let summary = TrainSummary {
        format: "darts-train-summary v1",
        mean_best_val_loss: seeds.iter().map(|s| s.best_val_loss).sum::<f64>() / seeds.len() as f64,
        seeds,
    };
    let text = serde_json::to_string_pretty(&summary).expect("plain struct serializes");
    write_text(&cfg.out_dir.join("summary.json"), &(text + "\n"))
}

/// Checkpoint files named by run: a single file, or `seed*/model.ckpt` and
/// `*.ckpt` inside a directory.
pub fn find_checkpoints(path: &Path) -> Result<Vec<(String, PathBuf)>> {
    if path.is_file() {
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        return Ok(vec![(name, path.to_path_buf())]);
    }
    let entries = std::fs::read_dir(path).map_err(|e| DartsError::io(path, e))?;
    let mut found = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| DartsError::io(path, e))?.path();
        let name = p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        if p.is_dir() && p.join("model.ckpt").is_file() {
            found.push((name, p.join("model.ckpt")));
        } else if p.extension().is_some_and(|e| e == "ckpt") {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            found.push((stem, p));
        }
    }
    found.sort();
    if found.is_empty() {
        return Err(DartsError::contract(format!("no checkpoints under {}", path.display())));
    }
    Ok(found)
}

fn load_checked(path: &Path, cfg: &RunConfig, n_channels: usize) -> Result<Darts> {
    let model = Darts::load(path)?;
    if model.n_channels() != n_channels {
        return Err(DartsError::Compatibility(format!(
            "{} was trained on {} channels, the data has {n_channels}",
            path.display(),
            model.n_channels()
        )));
    }
    if model.config() != &cfg.model {
        return Err(DartsError::Compatibility(format!(
            "{} was trained with a different model configuration",
            path.display()
        )));
    }
    Ok(model)
}

/// Applies the checkpoint's training statistics to a raw series.
fn standardized_for(model: &Darts, raw: &TimeSeriesDataset) -> Result<TimeSeriesDataset> {
    let stats = model
        .metadata
        .standardization
        .as_ref()
        .ok_or_else(|| DartsError::contract("checkpoint carries no standardization; train it first"))?;
    stats.apply(raw)
}

#[derive(Serialize)]
struct AveragedMetrics {
    format: &'static str,
    runs: Vec<String>,
    precision: f64,
    recall: f64,
    f1: f64,
}

/// Scores with every checkpoint; returns the per-run metrics when the test series is labeled.
pub fn score_command(cfg: &RunConfig, checkpoint: &Path, require_labels: bool) -> Result<Vec<(String, Metrics)>> {
    cfg.validate()?;
    snapshot(cfg)?;
    let mode = cfg.threshold_mode()?;
    let raw = cfg.load_test()?;
    if require_labels && raw.labels().is_none() {
        return Err(DartsError::contract("evaluation needs a labeled test series"));
    }
    let mut results = Vec::new();
    for (name, path) in find_checkpoints(checkpoint)? {
        let model = load_checked(&path, cfg, raw.n_channels())?;
        let test = standardized_for(&model, &raw)?;
        let (scores, report) = score_and_evaluate(&model, &test, cfg.score.stride, cfg.score.chunk, mode)?;
        save_scores(&cfg.out_dir.join(format!("scores_{name}.csv")), &scores, test.channel_names())?;
        if let Some(r) = report {
            let mode_name = if matches!(mode, ThresholdMode::BestF1) { "best_f1" } else { "fixed" };
            MetricsFile::new(&r, mode_name).save(&cfg.out_dir.join(format!("metrics_{name}.json")))?;
            results.push((name, r.metrics));
        }
    }
    if !results.is_empty() {
        let k = results.len() as f64;
        let avg = AveragedMetrics {
            format: "darts-metrics-mean v1",
            runs: results.iter().map(|(n, _)| n.clone()).collect(),
            precision: results.iter().map(|(_, m)| m.precision).sum::<f64>() / k,
            recall: results.iter().map(|(_, m)| m.recall).sum::<f64>() / k,
            f1: results.iter().map(|(_, m)| m.f1).sum::<f64>() / k,
        };
        let text = serde_json::to_string_pretty(&avg).expect("plain struct serializes");
        write_text(&cfg.out_dir.join("metrics.json"), &(text + "\n"))?;
    }
    Ok(results)
}

/// Writes per-head edge lists, the affinity matrix and the channel scores of
/// each selected sample; returns the selected origins.
pub fn export_command(cfg: &RunConfig, checkpoint: &Path) -> Result<Vec<usize>> {
    cfg.validate()?;
    snapshot(cfg)?;
    let raw = cfg.load_test()?;
    let (name, path) = find_checkpoints(checkpoint)?.remove(0);
    let model = load_checked(&path, cfg, raw.n_channels())?;
    let test = standardized_for(&model, &raw)?;
    let layout = model.config().layout();
    let all = make_samples(&test, layout)?;
    let selected: Vec<usize> = match cfg.export.select {
        Selector::Origins => cfg.export.origins.clone(),
        Selector::NormalAndAnomalous => {
            let labels = test
                .labels()
                .ok_or_else(|| DartsError::contract("normal/anomalous selection needs test labels"))?;
            let flagged = |o: usize| labels[o + layout.window..o + 2 * layout.window].iter().any(|&l| l);
            let normal = all.iter().map(|s| s.origin).find(|&o| !flagged(o));
            let anomalous = all.iter().map(|s| s.origin).find(|&o| flagged(o));
            normal.into_iter().chain(anomalous).collect()
        }
    };
    if selected.is_empty() {
        return Err(DartsError::contract("the sample selector matched nothing"));
    }
    let valid = layout.history..=test.len().saturating_sub(2 * layout.window);
    if let Some(bad) = selected.iter().find(|o| !valid.contains(o)) {
        return Err(DartsError::contract(format!(
            "origin {bad} outside the valid range {}..={}",
            valid.start(),
            valid.end()
        )));
    }
    let dir = cfg.out_dir.join("graphs");
    create_dir(&dir)?;
    let scores = crate::scoring::score(&model, &test, cfg.score.stride, cfg.score.chunk)?;
    for &origin in &selected {
        let sample = crate::data::samples_at(&test, layout, &[origin])[0];
        let snap = capture_graphs(&model, &sample)?;
        let prefix = format!("{name}_origin{origin}");
        save_snapshot(&dir, &prefix, &snap)?;
        let path = dir.join(format!("{prefix}_scores.csv"));
        let file = std::fs::File::create(&path).map_err(|e| DartsError::io(&path, e))?;
        write_scores(std::io::BufWriter::new(file), &scores, test.channel_names(), sample.target_span())
            .map_err(|e| DartsError::io(&path, e))?;
    }
    Ok(selected)
}

/// Writes `train_noisy.csv` into the output directory and returns its path.
pub fn noise_command(cfg: &RunConfig, ratio: f64) -> Result<PathBuf> {
    create_dir(&cfg.out_dir)?;
    snapshot(cfg)?;
    let train = match &cfg.data.train {
        Some(p) => load_csv(p, cfg.data.train_labels)?,
        None => cfg.load_data()?.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.noise.seed);
    let noisy = inject_noise(&train, ratio, &mut rng)?;
    let path = cfg.out_dir.join("train_noisy.csv");
    write_csv(&path, &noisy)?;
    Ok(path)
}

pub fn synthetic_command(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.data.synthetic.clone().unwrap_or_default();
    create_dir(&cfg.out_dir)?;
    snapshot(cfg)?;
    let data = generate_synthetic(&spec)?;
    write_csv(&cfg.out_dir.join("train.csv"), &data.train)?;
    write_csv(&cfg.out_dir.join("test.csv"), &data.test)?;
    let text = serde_json::to_string_pretty(&data.segments).expect("plain struct serializes");
    write_text(&cfg.out_dir.join("segments.json"), &(text + "\n"))
}

fn apply_score_args(cfg: &mut RunConfig, args: &ScoreArgs) -> PathBuf {
    if let Some(m) = args.mode {
        cfg.score.mode = m;
    }
    if let Some(t) = args.threshold {
        cfg.score.threshold = Some(t);
    }
    args.checkpoint.clone().unwrap_or_else(|| cfg.out_dir.clone())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => train(&resolve(&common)?),
        Command::Score(args) => {
            let mut cfg = resolve(&args.common)?;
            let ckpt = apply_score_args(&mut cfg, &args);
            score_command(&cfg, &ckpt, false).map(|_| ())
        }
        Command::Eval(args) => {
            let mut cfg = resolve(&args.common)?;
            let ckpt = apply_score_args(&mut cfg, &args);
            for (name, m) in score_command(&cfg, &ckpt, true)? {
                println!("{name}\tprecision {:.4}\trecall {:.4}\tf1 {:.4}", m.precision, m.recall, m.f1);
            }
            Ok(())
        }
        Command::ExportGraphs { args, origins } => {
            let mut cfg = resolve(&args.common)?;
            let ckpt = apply_score_args(&mut cfg, &args);
            if !origins.is_empty() {
                cfg.export.select = Selector::Origins;
                cfg.export.origins = origins;
            }
            export_command(&cfg, &ckpt).map(|_| ())
        }
        Command::InjectNoise { common, ratio } => {
            let mut cfg = resolve(&common)?;
            if let Some(r) = ratio {
                cfg.noise.ratio = r;
            }
            let path = noise_command(&cfg, cfg.noise.ratio)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::GenerateSynthetic(common) => synthetic_command(&resolve(&common)?),
    }
}
