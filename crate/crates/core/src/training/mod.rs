pub mod fit;
pub mod loss;
pub mod optim;

pub use fit::{evaluate_loss, fit, fit_with, split_validation, train_step, EpochRecord, TrainConfig, TrainReport};
pub use loss::{gaussian_nll, kl_loss, LossTerms, LossVars};
pub use optim::{clip_global_norm, global_norm, Adam, EarlyStopping, ReduceOnPlateau};
