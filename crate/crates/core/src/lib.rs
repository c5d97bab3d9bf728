pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod model;
pub mod pipeline;
pub mod scoring;
pub mod training;

pub use error::{DartsError, Result};
