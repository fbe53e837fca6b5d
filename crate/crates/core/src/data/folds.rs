//! User-grouped cross-validation folds.
//!
//! Users — never instances — are the unit of splitting, so no user's data
//! can appear on both sides of a fold. The split is a seeded shuffle of the
//! sorted unique user list followed by round-robin assignment, making fold
//! sizes as even as divisibility allows and the whole plan a pure function
//! of (users, k, seed).

use super::DataError;
use crate::tensor::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// One fold: held-out test users plus the nested 80/20 train/validation
/// partition of the remaining users.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub train_users: Vec<String>,
    pub val_users: Vec<String>,
    pub test_users: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<FoldSplit>,
}

impl FoldPlan {
    /// Verifies the structural invariants: test folds partition the users,
    /// train/val partition each fold's remainder, and nothing overlaps.
    pub fn audit(&self) -> Result<(), DataError> {
        let fail = |what: String| Err(DataError::Format(format!("fold plan: {what}")));
        if self.folds.len() != self.k {
            return fail(format!("{} folds, expected {}", self.folds.len(), self.k));
        }
        let mut all_test: Vec<&String> = Vec::new();
        for (f, fold) in self.folds.iter().enumerate() {
            let test: BTreeSet<_> = fold.test_users.iter().collect();
            let train: BTreeSet<_> = fold.train_users.iter().collect();
            let val: BTreeSet<_> = fold.val_users.iter().collect();
            if test.len() != fold.test_users.len()
                || train.len() != fold.train_users.len()
                || val.len() != fold.val_users.len()
            {
                return fail(format!("fold {f} has duplicate users"));
            }
            if train.intersection(&test).next().is_some()
                || val.intersection(&test).next().is_some()
            {
                return fail(format!("fold {f} leaks a test user into training"));
            }
            if train.intersection(&val).next().is_some() {
                return fail(format!("fold {f} overlaps train and validation"));
            }
            all_test.extend(&fold.test_users);
        }
        let unique: BTreeSet<_> = all_test.iter().collect();
        if unique.len() != all_test.len() {
            return fail("a user is tested in more than one fold".into());
        }
        for (f, fold) in self.folds.iter().enumerate() {
            let covered = fold.test_users.len() + fold.train_users.len() + fold.val_users.len();
            if covered != all_test.len() {
                return fail(format!(
                    "fold {f} covers {covered} users, expected {}",
                    all_test.len()
                ));
            }
        }
        Ok(())
    }
}

/// Splits users into `k` grouped folds. The input order does not matter:
/// users are deduplicated and sorted before the seeded shuffle. Within each
/// fold the non-test users are split 80/20 into train/validation (at least
/// one user on each side).
pub fn split_folds(user_ids: &[String], k: usize, seed: u64) -> Result<FoldPlan, DataError> {
    if k == 0 {
        return Err(DataError::Format("k must be positive".into()));
    }
    let mut users: Vec<String> = user_ids.to_vec();
    users.sort();
    users.dedup();
    if users.len() < k {
        return Err(DataError::TooFewUsers {
            n: users.len(),
            k,
        });
    }
    let mut rng = Rng::new(seed);
    rng.shuffle(&mut users);

    let mut test: Vec<Vec<String>> = vec![Vec::new(); k];
    for (i, u) in users.iter().enumerate() {
        test[i % k].push(u.clone());
    }

    let mut folds = Vec::with_capacity(k);
    for (f, test_users) in test.into_iter().enumerate() {
        let mut pool: Vec<String> = users
            .iter()
            .filter(|u| !test_users.contains(u))
            .cloned()
            .collect();
        // An independent stream per fold keeps the nested split stable under
        // changes to k.
        Rng::stream(seed, 1 + f as u64).shuffle(&mut pool);
        let n_val = if pool.len() < 2 {
            0
        } else {
            (((pool.len() as f64) * 0.2).round() as usize).clamp(1, pool.len() - 1)
        };
        let val_users: Vec<String> = pool[pool.len() - n_val..].to_vec();
        let train_users: Vec<String> = pool[..pool.len() - n_val].to_vec();
        folds.push(FoldSplit {
            train_users,
            val_users,
            test_users,
        });
    }
    let plan = FoldPlan { k, seed, folds };
    plan.audit()?;
    Ok(plan)
}
