use serde::{Deserialize, Serialize};

/// A validation loss counts as an improvement when it beats the best so far
/// by at least this much.
pub const IMPROVEMENT_THRESHOLD: f64 = 1e-6;

/// Reduce-on-plateau learning-rate schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauTracker {
    pub best_val_loss: Option<f64>,
    pub epochs_since_improvement: usize,
    pub current_lr: f64,
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
}

impl PlateauTracker {
    pub fn new(lr: f64, patience: usize, factor: f64, min_lr: f64) -> Self {
        Self {
            best_val_loss: None,
            epochs_since_improvement: 0,
            current_lr: lr,
            patience,
            factor,
            min_lr,
        }
    }

    /// Record one epoch's validation loss. Returns whether it improved on the best.
    pub fn update(&mut self, val_loss: f64) -> bool {
        let improved = self
            .best_val_loss
            .is_none_or(|best| val_loss < best - IMPROVEMENT_THRESHOLD);
        if improved {
            self.best_val_loss = Some(val_loss);
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
            if self.epochs_since_improvement >= self.patience {
                self.current_lr = (self.current_lr * self.factor).max(self.min_lr);
                self.epochs_since_improvement = 0;
            }
        }
        improved
    }

    /// The learning rate in effect at each epoch when `val_losses` are seen
    /// in order starting from `lr`.
    pub fn replay(lr: f64, patience: usize, factor: f64, min_lr: f64, val_losses: &[f64]) -> Vec<f64> {
        let mut t = Self::new(lr, patience, factor, min_lr);
        val_losses
            .iter()
            .map(|&v| {
                let used = t.current_lr;
                t.update(v);
                used
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decreasing_losses_keep_lr() {
        let mut t = PlateauTracker::new(5e-4, 10, 0.1, 1e-7);
        for v in [1.0, 0.9, 0.8] {
            assert!(t.update(v));
        }
        assert_eq!(t.current_lr, 5e-4);
    }

    #[test]
    fn stall_reduces_once() {
        let mut t = PlateauTracker::new(5e-4, 10, 0.1, 1e-7);
        t.update(1.0);
        for i in 0..10 {
            assert_eq!(t.current_lr, 5e-4, "epoch {i}");
            assert!(!t.update(1.0));
        }
        assert!((t.current_lr - 5e-5).abs() < 1e-18);
        assert_eq!(t.epochs_since_improvement, 0);
    }

    #[test]
    fn floor_holds() {
        let mut t = PlateauTracker::new(1e-3, 1, 0.1, 1e-7);
        t.update(1.0);
        for _ in 0..20 {
            t.update(2.0);
        }
        assert_eq!(t.current_lr, 1e-7);
    }

    #[test]
    fn tiny_gains_are_not_improvements() {
        let mut t = PlateauTracker::new(1.0, 10, 0.1, 0.0);
        t.update(1.0);
        assert!(!t.update(1.0 - 5e-7));
        assert!(t.update(1.0 - 2e-6));
        assert_eq!(t.best_val_loss, Some(1.0 - 2e-6));
    }
}
