use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Cohort;
use crate::error::{Error, Result};

/// Number of rotation groups; 3 of 5 train, 1 validates, 1 tests (60:20:20).
const GROUPS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n_folds: usize,
    pub assignments: Vec<FoldAssignment>,
}

/// Shuffles slide ids with `seed` and cuts them into rotation groups.
///
/// With `g = max(n_folds, 5)` groups, fold `k` tests on group `k`,
/// validates on group `k + 1 (mod g)` and trains on the rest. Test sets
/// are therefore disjoint across folds. Fewer than five folds take the
/// first folds of the five-group rotation so proportions stay 60:20:20.
pub fn split_folds(cohort: &Cohort, n_folds: usize, seed: u64) -> Result<FoldPlan> {
    let n = cohort.slides.len();
    let groups = n_folds.max(GROUPS);
    if n_folds == 0 {
        return Err(Error::Config("n_folds must be at least 1".into()));
    }
    if n < groups {
        return Err(Error::Invalid(format!(
            "{n} slides cannot be split into {n_folds} folds (need at least {groups})"
        )));
    }
    let mut ids: Vec<String> = cohort.slides.iter().map(|s| s.slide_id.clone()).collect();
    ids.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);

    // Group sizes differ by at most one.
    let mut chunks: Vec<Vec<String>> = Vec::with_capacity(groups);
    let mut start = 0;
    for g in 0..groups {
        let len = n / groups + usize::from(g < n % groups);
        chunks.push(ids[start..start + len].to_vec());
        start += len;
    }

    let assignments = (0..n_folds)
        .map(|k| {
            let val_group = (k + 1) % groups;
            let mut train = Vec::new();
            for (g, chunk) in chunks.iter().enumerate() {
                if g != k && g != val_group {
                    train.extend(chunk.iter().cloned());
                }
            }
            FoldAssignment {
                train,
                val: chunks[val_group].clone(),
                test: chunks[k].clone(),
            }
        })
        .collect();
    Ok(FoldPlan {
        n_folds,
        assignments,
    })
}
