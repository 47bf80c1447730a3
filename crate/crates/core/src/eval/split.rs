use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const TEST_FRACTION: f64 = 0.2;
pub const VALIDATION_FRACTION: f64 = 0.2;
pub const MIN_PER_CLASS: usize = 5;

/// Patient-level split; every list is sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitPlan {
    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn take_fraction(pool: &mut Vec<usize>, fraction: f64) -> Vec<usize> {
    let n = (pool.len() as f64 * fraction).round() as usize;
    pool.split_off(pool.len() - n)
}

/// Stratified 80/20 train/test, then 1/5 of train held out for validation.
pub fn split_dataset(labels: &[bool], seed: u64) -> Result<SplitPlan> {
    let mut r = rng::stream(seed, "split");
    let mut plan = SplitPlan {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.len() < MIN_PER_CLASS {
            return Err(Error::input(format!(
                "{} {} samples; splitting needs at least {MIN_PER_CLASS} per class",
                idx.len(),
                if class { "case" } else { "control" }
            )));
        }
        idx.shuffle(&mut r);
        plan.test.extend(take_fraction(&mut idx, TEST_FRACTION));
        plan.validation
            .extend(take_fraction(&mut idx, VALIDATION_FRACTION));
        plan.train.extend(idx);
    }
    plan.train.sort_unstable();
    plan.validation.sort_unstable();
    plan.test.sort_unstable();
    Ok(plan)
}
