use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub max_angle_deg: f64,
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            max_angle_deg: 10.0,
            flip_prob: 0.5,
        }
    }
}

/// Optimizer, schedule, augmentation and split settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub min_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub folds: usize,
    pub loss: LossKind,
    /// Spatial dims every training case is padded or cropped to.
    pub input_dims: [usize; 3],
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            epochs: 500,
            plateau_patience: 10,
            plateau_factor: 0.1,
            min_lr: 1e-7,
            batch_size: 2,
            seed: 0,
            folds: 9,
            loss: LossKind::Combined,
            input_dims: [48, 64, 48],
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, divisor: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad(format!("plateau_factor must be in (0, 1), got {}", self.plateau_factor));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return bad(format!("min_lr must be in [0, lr], got {}", self.min_lr));
        }
        if self.plateau_patience == 0 {
            return bad("plateau_patience must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.folds != 9 {
            return bad(format!("folds must be 9, got {}", self.folds));
        }
        if self.input_dims.iter().any(|&d| d == 0 || d % divisor != 0) {
            return bad(format!("input_dims {:?} must be positive multiples of {divisor}", self.input_dims));
        }
        let a = &self.augment;
        if !(0.0..=180.0).contains(&a.max_angle_deg) || !(0.0..=1.0).contains(&a.flip_prob) {
            return bad("augment.max_angle_deg must be in [0, 180] and flip_prob in [0, 1]".into());
        }
        Ok(())
    }
}
