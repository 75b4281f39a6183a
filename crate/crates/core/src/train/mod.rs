//! Training: Dice loss, Adam, the step-decay schedule and early stopping.

mod adam;
mod fit;
mod loss;
mod state;

use std::str::FromStr;

pub use adam::Adam;
pub use fit::{evaluate_loss, fit, EpochEvent, FitOutcome};
pub use loss::dice_loss;
pub use state::{read_history, write_history, HistoryRow, TrainState};

use crate::data::DataError;
use crate::model::ModelError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: String },
    #[error("training state: {0}")]
    State(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("stopped by observer: {0}")]
    Aborted(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_start: f64,
    pub lr_decay: f64,
    /// Last epoch trained at `lr_start`.
    pub decay_start_epoch: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub dice_smooth: f64,
    pub seed: u64,
    /// Random rotations and flips of training samples.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_start: 0.0025,
            lr_decay: 0.985,
            decay_start_epoch: 150,
            batch_size: 8,
            max_epochs: 500,
            early_stop_patience: 25,
            dice_smooth: 1.0,
            seed: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr_start > 0.0 && self.lr_start.is_finite()) {
            return Err(TrainError::Config(format!("lr_start must be > 0, got {}", self.lr_start)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(TrainError::Config(format!("lr_decay must be in (0,1], got {}", self.lr_decay)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be ≥ 1".into()));
        }
        if !(self.dice_smooth > 0.0) {
            return Err(TrainError::Config("dice_smooth must be > 0".into()));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lr_start", format!("{:?}", self.lr_start)),
            ("lr_decay", format!("{:?}", self.lr_decay)),
            ("decay_start_epoch", self.decay_start_epoch.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("early_stop_patience", self.early_stop_patience.to_string()),
            ("dice_smooth", format!("{:?}", self.dice_smooth)),
            ("seed", self.seed.to_string()),
            ("augment", self.augment.to_string()),
        ]
    }

    /// Sets one field. Returns `false` when `key` is not a training key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, TrainError> {
        fn parse<V: FromStr>(key: &str, value: &str) -> Result<V, TrainError> {
            value.parse().map_err(|_| TrainError::Config(format!("bad value `{value}` for {key}")))
        }
        match key {
            "lr_start" => self.lr_start = parse(key, value)?,
            "lr_decay" => self.lr_decay = parse(key, value)?,
            "decay_start_epoch" => self.decay_start_epoch = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "early_stop_patience" => self.early_stop_patience = parse(key, value)?,
            "dice_smooth" => self.dice_smooth = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "augment" => self.augment = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Learning rate of `epoch`: constant through `decay_start_epoch`, then
/// multiplied by `lr_decay` every epoch.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch <= cfg.decay_start_epoch {
        cfg.lr_start
    } else {
        cfg.lr_start * cfg.lr_decay.powi((epoch - cfg.decay_start_epoch) as i32)
    }
}
