//! User-grouped cross-validation: every fold trains a fresh model on its
//! train users, watches its validation users, and is scored once on its
//! test users — and the run is audited afterwards against the training
//! trace, not just the intended split.

use std::collections::BTreeSet;

use super::{evaluate, train, Adam, AdamHyper, TrainError, TrainLogLine, TrainPlan};
use crate::data::{split_folds, Dataset, FoldPlan};
use crate::metrics::{aggregate, FoldReport, Summary};
use crate::model::{Model, ModelConfig};
use crate::objective::{compute_instance_weights, WeightMatrix};
use crate::tensor::Scalar;

/// A full cross-validation run: the user split, one report per fold, the
/// fold-aggregated summary, each fold's training log, and the users whose
/// instances each fold actually trained on (as recorded by the training
/// loop, so the split can be re-audited after the fact).
#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub plan: FoldPlan,
    pub folds: Vec<FoldReport>,
    pub summary: Summary,
    pub logs: Vec<Vec<TrainLogLine>>,
    pub trained_users: Vec<BTreeSet<String>>,
}

/// Distinct model seed per fold, derived from the plan seed.
fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed ^ (fold as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Fails if any user whose instances went through training sits in the
/// fold's test set.
pub fn audit_leakage(
    fold: usize,
    touched_users: &BTreeSet<String>,
    test_users: &[String],
) -> Result<(), TrainError> {
    let test: BTreeSet<&String> = test_users.iter().collect();
    let leaked: Vec<String> = touched_users
        .iter()
        .filter(|u| test.contains(u))
        .cloned()
        .collect();
    if leaked.is_empty() {
        Ok(())
    } else {
        Err(TrainError::Leakage {
            fold,
            users: leaked,
        })
    }
}

/// Runs `k`-fold user-grouped cross-validation of `config` under `plan`.
///
/// Folds are split by user with [`split_folds`] on the plan seed; each fold
/// builds a fresh model (per-fold seed) and fresh instance weights from its
/// own training pool, trains for the full plan, and is scored on its test
/// users at `threshold`. Validation users are scored along the way but
/// steer nothing. After each fold the set of users actually fed through
/// training is checked against the test users.
pub fn run_cv<T: Scalar>(
    config: &ModelConfig,
    plan: &TrainPlan,
    ds: &Dataset,
    k: usize,
    threshold: f64,
) -> Result<CvOutcome, TrainError> {
    plan.validate()?;
    let config = config.normalized()?;
    let users = ds.users();
    let fold_plan = split_folds(&users, k, plan.seed)?;

    let mut folds = Vec::new();
    let mut logs = Vec::new();
    let mut trained_users = Vec::new();
    for (f, split) in fold_plan.folds.iter().enumerate() {
        let pool = ds.indices_for_users(&split.train_users);
        let val = ds.indices_for_users(&split.val_users);
        let test = ds.indices_for_users(&split.test_users);
        if pool.is_empty() {
            return Err(TrainError::Plan(format!(
                "fold {f}: no instances for train users {:?}",
                split.train_users
            )));
        }
        if test.is_empty() {
            return Err(TrainError::Plan(format!(
                "fold {f}: no instances for test users {:?}",
                split.test_users
            )));
        }

        let mut model: Model<T> = Model::build(&config, fold_seed(plan.seed, f))?;
        let mut adam = Adam::new(AdamHyper::with_lr(plan.lr), &model.params())?;
        let labels = ds.label_matrix(&pool)?;
        let psi = if plan.weighting {
            compute_instance_weights(&labels)?
        } else {
            WeightMatrix::uniform(&labels)
        };

        let outcome = train(
            &mut model,
            &mut adam,
            ds,
            &pool,
            (!val.is_empty()).then_some(val.as_slice()),
            plan,
            &psi,
            None,
        )?;
        audit_leakage(f, &outcome.touched_users, &split.test_users)?;

        folds.push(evaluate(&mut model, ds, &test, threshold, plan.batch_size)?);
        logs.push(outcome.log);
        trained_users.push(outcome.touched_users);
    }

    let summary = aggregate(&folds)?;
    Ok(CvOutcome {
        plan: fold_plan,
        folds,
        summary,
        logs,
        trained_users,
    })
}
