use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// Fraction of ids held out as the test set (rounded up).
pub const TEST_FRACTION: f64 = 0.1;
pub const NUM_FOLDS: usize = 9;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub test_ids: Vec<String>,
    pub folds: Vec<Vec<String>>,
}

impl SplitPlan {
    pub fn num_folds(&self) -> usize {
        self.folds.len()
    }

    fn check_fold(&self, fold: usize) -> Result<()> {
        if fold >= self.folds.len() {
            return Err(Error::config(format!(
                "fold {fold} out of range, valid folds are 0..={}",
                self.folds.len() - 1
            )));
        }
        Ok(())
    }

    /// Ids of every fold except `fold`, in fold order.
    pub fn train_ids(&self, fold: usize) -> Result<Vec<String>> {
        self.check_fold(fold)?;
        Ok(self
            .folds
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != fold)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect())
    }

    pub fn val_ids(&self, fold: usize) -> Result<Vec<String>> {
        self.check_fold(fold)?;
        Ok(self.folds[fold].clone())
    }
}

/// Shuffle ids deterministically, hold out `ceil(10%)` for testing and deal
/// the rest round-robin into nine folds. Input order does not matter.
pub fn make_split(ids: &[String], seed: u64) -> Result<SplitPlan> {
    if ids.len() < 10 {
        return Err(Error::config(format!("a split needs at least 10 cases, got {}", ids.len())));
    }
    let mut sorted = ids.to_vec();
    sorted.sort();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::config(format!("duplicate case id {:?}", w[0])));
    }
    sorted.shuffle(&mut rng::stream(seed, &[tag::SPLIT]));
    let n_test = (ids.len() as f64 * TEST_FRACTION).ceil() as usize;
    let rest = sorted.split_off(n_test);
    let mut folds = vec![Vec::new(); NUM_FOLDS];
    for (i, id) in rest.into_iter().enumerate() {
        folds[i % NUM_FOLDS].push(id);
    }
    Ok(SplitPlan {
        seed,
        test_ids: sorted,
        folds,
    })
}
