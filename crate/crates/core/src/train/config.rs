use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::models::MIN_FRAMES;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Multiplicative learning-rate decay applied after every epoch.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Non-improving epochs tolerated before stopping.
    pub patience: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Frames per training window. `None` uses the shortest clip in the
    /// data, i.e. whole clips when all clips have the same length.
    pub crop_frames: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 5e-4,
            lr_decay: 0.95,
            batch_size: 64,
            max_epochs: 50,
            patience: 10,
            seed: 0,
            augment: AugmentConfig::default(),
            crop_frames: None,
        }
    }
}

impl TrainConfig {
    /// Learning rate used during epoch `epoch` (0-based).
    pub fn lr(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi(epoch as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Validation(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Validation(format!("lr_decay must be in (0, 1], got {}", self.lr_decay)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Validation("batch_size and max_epochs must be positive".into()));
        }
        if self.crop_frames.is_some_and(|f| f < MIN_FRAMES) {
            return Err(Error::Validation(format!("crop_frames must be at least {MIN_FRAMES}")));
        }
        self.augment.validate()
    }
}
