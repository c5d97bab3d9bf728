//! Python bindings. Series cross the boundary as time-major row lists;
//! configurations as TOML strings using the same keys as the run file.

use std::path::PathBuf;

use clap::Parser;
use darts::cli::{Cli, RunConfig};
use darts::data::{inject_noise as corrupt, TimeSeriesDataset};
use darts::model::{Darts, ModelConfig};
use darts::pipeline::{score_and_evaluate, train_seed, Prepared};
use darts::scoring::ThresholdMode;
use darts::training::TrainConfig;
use darts::DartsError;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;

fn to_py(e: DartsError) -> PyErr {
    match e {
        DartsError::Io { .. } => PyIOError::new_err(e.to_string()),
        DartsError::Config(_) | DartsError::Parameter(_) | DartsError::Shape(_) | DartsError::Format { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

pub fn parse_section<T: DeserializeOwned + Default>(text: &str, what: &str) -> darts::Result<T> {
    if text.trim().is_empty() {
        return Ok(T::default());
    }
    toml::from_str(text).map_err(|e| DartsError::config(format!("{what}: {}", e.message())))
}

pub fn dataset(rows: &[Vec<f64>], labels: Option<Vec<bool>>) -> darts::Result<TimeSeriesDataset> {
    TimeSeriesDataset::from_rows(rows, labels)
}

pub fn rows_of(ds: &TimeSeriesDataset) -> Vec<Vec<f64>> {
    ds.rows().map(<[f64]>::to_vec).collect()
}

/// A trained detector with its standardization and score calibration.
#[pyclass]
pub struct Detector {
    model: Darts,
}

#[pymethods]
impl Detector {
    /// Trains on `rows` (time x channels) with one seed.
    #[staticmethod]
    #[pyo3(signature = (rows, model_config = "", train_config = "", seed = 0, score_stride = 1))]
    fn train(rows: Vec<Vec<f64>>, model_config: &str, train_config: &str, seed: u64, score_stride: usize) -> PyResult<Self> {
        let model_cfg: ModelConfig = parse_section(model_config, "model_config").map_err(to_py)?;
        let train_cfg: TrainConfig = parse_section(train_config, "train_config").map_err(to_py)?;
        let raw = dataset(&rows, None).map_err(to_py)?;
        let prepared = Prepared::new(&raw, &raw).map_err(to_py)?;
        let run = train_seed(&prepared.train, &model_cfg, &train_cfg, seed, score_stride, |_| {}).map_err(to_py)?;
        Ok(Self { model: run.model })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Darts::load(&path).map(|model| Self { model }).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.model.save(&path).map_err(to_py)
    }

    #[getter]
    fn n_channels(&self) -> usize {
        self.model.n_channels()
    }

    /// Returns `(first_scored, global, per_channel)` for raw rows; entries
    /// before `first_scored` are zero.
    #[pyo3(signature = (rows, stride = 1, chunk = 8))]
    fn score(&self, rows: Vec<Vec<f64>>, stride: usize, chunk: usize) -> PyResult<(usize, Vec<f64>, Vec<Vec<f64>>)> {
        let test = self.standardized(&rows, None)?;
        let (s, _) = score_and_evaluate(&self.model, &test, stride, chunk, ThresholdMode::BestF1).map_err(to_py)?;
        let per = (0..s.len()).map(|t| s.row(t).to_vec()).collect();
        Ok((s.first_scored, s.global.clone(), per))
    }

    /// Scores labeled rows and returns precision, recall, f1 and the threshold.
    #[pyo3(signature = (rows, labels, threshold = None, stride = 1, chunk = 8))]
    fn evaluate(
        &self,
        rows: Vec<Vec<f64>>,
        labels: Vec<bool>,
        threshold: Option<f64>,
        stride: usize,
        chunk: usize,
    ) -> PyResult<(f64, f64, f64, f64)> {
        let test = self.standardized(&rows, Some(labels))?;
        let mode = threshold.map_or(ThresholdMode::BestF1, ThresholdMode::Fixed);
        let (_, report) = score_and_evaluate(&self.model, &test, stride, chunk, mode).map_err(to_py)?;
        let r = report.expect("labels were supplied");
        Ok((r.metrics.precision, r.metrics.recall, r.metrics.f1, r.threshold))
    }
}

impl Detector {
    fn standardized(&self, rows: &[Vec<f64>], labels: Option<Vec<bool>>) -> PyResult<TimeSeriesDataset> {
        let raw = dataset(rows, labels).map_err(to_py)?;
        let stats = self
            .model
            .metadata
            .standardization
            .as_ref()
            .ok_or_else(|| PyRuntimeError::new_err("detector has no standardization"))?;
        stats.apply(&raw).map_err(to_py)
    }
}

/// `(train_rows, train_labels, test_rows, test_labels)` for a synthetic spec.
#[pyfunction]
#[pyo3(signature = (spec = ""))]
fn generate_synthetic(spec: &str) -> PyResult<(Vec<Vec<f64>>, Vec<bool>, Vec<Vec<f64>>, Vec<bool>)> {
    let spec = parse_section(spec, "spec").map_err(to_py)?;
    let data = darts::data::generate_synthetic(&spec).map_err(to_py)?;
    let labels = |d: &TimeSeriesDataset| d.labels().map(<[bool]>::to_vec).unwrap_or_default();
    Ok((rows_of(&data.train), labels(&data.train), rows_of(&data.test), labels(&data.test)))
}

#[pyfunction]
#[pyo3(signature = (rows, ratio = 0.5, seed = 0))]
fn inject_noise(rows: Vec<Vec<f64>>, ratio: f64, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    let ds = dataset(&rows, None).map_err(to_py)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    corrupt(&ds, ratio, &mut rng).map(|d| rows_of(&d)).map_err(to_py)
}

/// Runs the command line with `args` (without the program name); returns the exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(std::iter::once("darts".to_string()).chain(args)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match darts::cli::run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Validates a run configuration file; returns it fully resolved as TOML.
#[pyfunction]
fn resolve_config(path: PathBuf) -> PyResult<String> {
    let cfg = RunConfig::load(&path).map_err(to_py)?;
    cfg.validate().map_err(to_py)?;
    Ok(cfg.to_toml())
}

#[pymodule]
fn darts_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Detector>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(inject_noise, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_function(wrap_pyfunction!(resolve_config, m)?)?;
    Ok(())
}
