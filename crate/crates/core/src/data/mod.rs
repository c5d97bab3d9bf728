//! Dataset ingestion, standardization, windowing, synthetic generation and noise corruption.

mod csv_io;
mod dataset;
mod noise;
mod synthetic;
mod windows;

pub use csv_io::{load_csv, read_csv, write_csv};
pub use dataset::{standardize, Standardization, TimeSeriesDataset, CONSTANT_STD};
pub use noise::{inject_noise, DEFAULT_NOISE_RATIO};
pub use synthetic::{generate_synthetic, AnomalyKind, AnomalySegment, SyntheticData, SyntheticSpec};
pub use windows::{make_samples, samples_at, TrainingSample, WindowLayout};
