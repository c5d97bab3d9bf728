//! End-to-end steps shared by the command line, the bindings and the
//! benchmark tests: standardize, train per seed, calibrate, score, evaluate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{make_samples, standardize, Standardization, TimeSeriesDataset};
use crate::error::{DartsError, Result};
use crate::model::{Darts, ModelConfig};
use crate::scoring::{calibrate, evaluate, score, AnomalyReport, ScoreSet, ThresholdMode};
use crate::training::{fit_with, split_validation, EpochRecord, TrainConfig, TrainReport};

/// Train and test series standardized with the training statistics.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: TimeSeriesDataset,
    pub test: TimeSeriesDataset,
    pub stats: Standardization,
}

impl Prepared {
    pub fn new(train: &TimeSeriesDataset, test: &TimeSeriesDataset) -> Result<Self> {
        if train.n_channels() != test.n_channels() {
            return Err(DartsError::shape(format!(
                "train has {} channels, test has {}",
                train.n_channels(),
                test.n_channels()
            )));
        }
        let (train, mut rest) = standardize(train, &[test])?;
        let stats = train.stats().cloned().expect("standardized data carries its statistics");
        Ok(Self {
            train,
            test: rest.remove(0),
            stats,
        })
    }
}

pub struct SeedRun {
    pub seed: u64,
    pub model: Darts,
    pub report: TrainReport,
}

/// Initializes a model from `seed`, trains it and calibrates its scores on
/// the validation tail at the scoring stride.
pub fn train_seed(
    train: &TimeSeriesDataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seed: u64,
    score_stride: usize,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<SeedRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Darts::new(model_cfg.clone(), train.n_channels(), &mut rng)?;
    let samples = make_samples(train, model_cfg.layout())?;
    let report = fit_with(&mut model, &samples, train_cfg, &mut rng, on_epoch)?;
    let (_, val) = split_validation(&samples, train_cfg.validation_fraction)?;
    calibrate(&mut model, val, score_stride, train_cfg.micro_batch)?;
    model.metadata.standardization = train.stats().cloned();
    model.metadata.channel_names = train.channel_names().to_vec();
    Ok(SeedRun { seed, model, report })
}

/// Scores `test` and, when it carries labels, evaluates the scored span.
pub fn score_and_evaluate(
    model: &Darts,
    test: &TimeSeriesDataset,
    stride: usize,
    chunk: usize,
    mode: ThresholdMode,
) -> Result<(ScoreSet, Option<AnomalyReport>)> {
    let scores = score(model, test, stride, chunk)?;
    let report = match test.labels() {
        Some(labels) => Some(evaluate(scores.scored_global(), &labels[scores.first_scored..], mode)?),
        None => None,
    };
    Ok((scores, report))
}
