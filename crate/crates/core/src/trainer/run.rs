//! The training loop and its checkpoints.
//!
//! Every stochastic choice is a pure function of (plan seed, step): the
//! batch comes from [`Batcher::batch_for_step`] and the dropout draws from a
//! per-step RNG stream. Combined with Adam state that rides along in the
//! checkpoint, a run stopped at step s and resumed lands on exactly the
//! trajectory of an uninterrupted run, bit for bit.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use super::{Adam, TrainError, TrainPlan};
use crate::data::{Batcher, Dataset};
use crate::layers::{LayerError, Phase};
use crate::metrics::{confusion, FoldReport};
use crate::model::{checkpoint_load, checkpoint_save, Batch, Model, ModelError};
use crate::objective::{
    weighted_masked_bce_from_logits, LabelMatrix, ObjectiveError, WeightMatrix,
};
use crate::tensor::{Rng, Scalar, Tensor, TensorError};

/// Decorrelates the dropout stream from the batch-order stream, which is
/// seeded with the plan seed directly.
const DROPOUT_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// One progress line: the step, wall time since the run started, the
/// training loss at that step (regularization included), and the macro
/// balanced accuracy on the validation slice when one was given.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainLogLine {
    pub step: u64,
    pub wall_ms: u64,
    pub loss: f64,
    pub val_ba: Option<f64>,
}

impl TrainLogLine {
    /// Render for the console / log file.
    pub fn render(&self) -> String {
        match self.val_ba {
            Some(ba) => format!(
                "step {:>7}  wall_ms {:>8}  loss {:.6}  val_ba {:.4}",
                self.step, self.wall_ms, self.loss, ba
            ),
            None => format!(
                "step {:>7}  wall_ms {:>8}  loss {:.6}",
                self.step, self.wall_ms, self.loss
            ),
        }
    }

    /// Everything except wall time, with float bits spelled out — two runs
    /// of the same plan must agree on this string exactly.
    pub fn deterministic_part(&self) -> String {
        format!(
            "step={} loss={:016x} val_ba={}",
            self.step,
            self.loss.to_bits(),
            match self.val_ba {
                Some(ba) => format!("{:016x}", ba.to_bits()),
                None => "-".to_string(),
            }
        )
    }
}

/// What a training run produced: the log, the users whose instances were
/// fed through the model (for leakage auditing), and the loss on the final
/// line.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<TrainLogLine>,
    pub touched_users: BTreeSet<String>,
    pub final_loss: f64,
}

/// The tensor and objective layers fail fast on non-finite values; inside
/// a training step such a failure IS divergence, so it aborts with the step
/// identified instead of surfacing as an internal error.
fn numerical_root(err: &TrainError) -> bool {
    let non_finite_model = |m: &ModelError| {
        matches!(
            m,
            ModelError::Tensor(TensorError::NonFinite(_))
                | ModelError::Layer(LayerError::Tensor(TensorError::NonFinite(_)))
                | ModelError::Objective(ObjectiveError::NonFinite { .. })
        )
    };
    match err {
        TrainError::Tensor(TensorError::NonFinite(_)) => true,
        TrainError::Objective(ObjectiveError::NonFinite { .. }) => true,
        TrainError::Model(m) => non_finite_model(m),
        _ => false,
    }
}

fn divergence_guard(step: u64, r: Result<f64, TrainError>) -> Result<f64, TrainError> {
    match r {
        Ok(loss) if loss.is_finite() => Ok(loss),
        Ok(loss) => Err(TrainError::Diverged { step, loss }),
        Err(e) if numerical_root(&e) => Err(TrainError::Diverged {
            step,
            loss: f64::NAN,
        }),
        Err(e) => Err(e),
    }
}

/// Train-phase loss on one batch; with `with_grads` the parameter gradients
/// are populated too, otherwise parameters and gradients are left alone.
fn compute_loss<T: Scalar>(
    model: &mut Model<T>,
    batch: &Batch<T>,
    labels: &LabelMatrix,
    psi_b: &WeightMatrix,
    rng: &mut Rng,
    with_grads: bool,
) -> Result<f64, TrainError> {
    if model.config().multi_task {
        let heads = model.forward_heads(batch, Phase::Train, rng)?;
        if with_grads {
            let (loss, grads) = model.multitask_loss(&heads, labels, psi_b)?;
            model.backward_heads(&grads)?;
            Ok(loss)
        } else {
            let mut total = 0.0;
            for (_, logits) in &heads {
                let (l, _) = weighted_masked_bce_from_logits(logits, labels, psi_b)?;
                total += l;
            }
            Ok(total + model.reg_value())
        }
    } else {
        let logits = model.forward_logits(batch, Phase::Train, rng)?;
        let (data_loss, grad) = weighted_masked_bce_from_logits(&logits, labels, psi_b)?;
        if with_grads {
            let reg = model.apply_reg();
            model.backward(&grad)?;
            Ok(data_loss + reg)
        } else {
            Ok(data_loss + model.reg_value())
        }
    }
}

fn check_alignment<T: Scalar>(
    model: &Model<T>,
    ds: &Dataset,
    pool: &[usize],
    psi: &WeightMatrix,
) -> Result<(), TrainError> {
    let plan_err = |msg: String| Err(TrainError::Plan(msg));
    if pool.is_empty() {
        return plan_err("training pool is empty".into());
    }
    if let Some(&bad) = pool.iter().find(|&&i| i >= ds.instances.len()) {
        return plan_err(format!(
            "pool index {bad} out of range for {} instances",
            ds.instances.len()
        ));
    }
    let config = model.config();
    if config.label_count != ds.header.n_labels {
        return plan_err(format!(
            "model has {} labels but the dataset declares {}",
            config.label_count, ds.header.n_labels
        ));
    }
    if config.modalities.contains(&crate::model::Modality::Ps)
        && config.ps_width != ds.header.ps_width
    {
        return plan_err(format!(
            "model ps_width {} but the dataset declares {}",
            config.ps_width, ds.header.ps_width
        ));
    }
    if psi.n_rows() != pool.len() || psi.n_labels() != config.label_count {
        return plan_err(format!(
            "weight matrix is {}x{}, expected {}x{} (one row per pool instance)",
            psi.n_rows(),
            psi.n_labels(),
            pool.len(),
            config.label_count
        ));
    }
    Ok(())
}

/// Runs `plan.iterations` Adam steps over the pool, starting from wherever
/// `model.step()` already is (so a loaded checkpoint resumes in place).
///
/// `pool` holds dataset indices; `psi` is the instance-weight matrix aligned
/// row-for-row with `pool`. `val`, when given, is scored at every log point
/// with threshold 0.5 — observational only, nothing feeds back into the
/// run. With `ckpt_dir`, the model+optimizer state is written at every log
/// point and after the final step, so a crash loses at most one cadence
/// window and divergence keeps the last checkpoint on disk.
///
/// Log lines appear at every step divisible by `eval_cadence`, plus a final
/// line at `plan.iterations` whose loss is measured without updating
/// anything; when the cadence divides the iteration count that is
/// iterations / eval_cadence + 1 lines.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    adam: &mut Adam,
    ds: &Dataset,
    pool: &[usize],
    val: Option<&[usize]>,
    plan: &TrainPlan,
    psi: &WeightMatrix,
    ckpt_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    plan.validate()?;
    check_alignment(model, ds, pool, psi)?;
    if adam.t() != model.step() {
        return Err(TrainError::Plan(format!(
            "optimizer at t={} but model at step {}",
            adam.t(),
            model.step()
        )));
    }
    let start = model.step();
    if start > plan.iterations {
        return Err(TrainError::Plan(format!(
            "model already at step {start}, past the planned {}",
            plan.iterations
        )));
    }

    let batcher = Batcher::new(pool.len(), plan.batch_size, plan.seed)?;
    let modalities = model.config().modalities.clone();
    let clock = Instant::now();
    let mut log = Vec::new();
    let mut touched: BTreeSet<String> = BTreeSet::new();

    let eval_val = |model: &mut Model<T>| -> Result<Option<f64>, TrainError> {
        match val {
            Some(idx) if !idx.is_empty() => {
                Ok(evaluate(model, ds, idx, 0.5, plan.batch_size)?.macro_ba)
            }
            _ => Ok(None),
        }
    };

    for s in start..plan.iterations {
        let positions = batcher.batch_for_step(s);
        let global: Vec<usize> = positions.iter().map(|&p| pool[p]).collect();
        for &g in &global {
            touched.insert(ds.instances[g].user.clone());
        }
        let (batch, labels) = ds.make_batch::<T>(&global, &modalities)?;
        let psi_b = psi.select_rows(&positions);
        let mut rng = Rng::stream(plan.seed ^ DROPOUT_SALT, s);

        model.zero_grads();
        let loss = divergence_guard(
            s,
            compute_loss(model, &batch, &labels, &psi_b, &mut rng, true),
        )?;

        if s % plan.eval_cadence == 0 {
            let val_ba = eval_val(model)?;
            log.push(TrainLogLine {
                step: s,
                wall_ms: clock.elapsed().as_millis() as u64,
                loss,
                val_ba,
            });
            if let Some(dir) = ckpt_dir {
                save_train_checkpoint(dir, model, adam)?;
            }
        }

        let mut params = model.params_mut();
        adam.step(&mut params)?;
        model.set_step(s + 1);
    }

    if let Some(dir) = ckpt_dir {
        save_train_checkpoint(dir, model, adam)?;
    }

    // Final line: the loss at the finishing parameters on the batch the next
    // step would have drawn. Measured like a training step (dropout active)
    // but nothing is updated.
    let positions = batcher.batch_for_step(plan.iterations);
    let global: Vec<usize> = positions.iter().map(|&p| pool[p]).collect();
    let (batch, labels) = ds.make_batch::<T>(&global, &modalities)?;
    let psi_b = psi.select_rows(&positions);
    let mut rng = Rng::stream(plan.seed ^ DROPOUT_SALT, plan.iterations);
    let final_loss = divergence_guard(
        plan.iterations,
        compute_loss(model, &batch, &labels, &psi_b, &mut rng, false),
    )?;
    let val_ba = eval_val(model)?;
    log.push(TrainLogLine {
        step: plan.iterations,
        wall_ms: clock.elapsed().as_millis() as u64,
        loss: final_loss,
        val_ba,
    });

    Ok(TrainOutcome {
        log,
        touched_users: touched,
        final_loss,
    })
}

/// Scores `indices` with the model at threshold `threshold`, forwarding in
/// inference phase in chunks of `batch_size`. Multi-task models score with
/// the uniform head average over the configured modalities.
pub fn evaluate<T: Scalar>(
    model: &mut Model<T>,
    ds: &Dataset,
    indices: &[usize],
    threshold: f64,
    batch_size: usize,
) -> Result<FoldReport, TrainError> {
    if indices.is_empty() {
        return Err(TrainError::Plan("evaluation needs at least one instance".into()));
    }
    if batch_size == 0 {
        return Err(TrainError::Plan("evaluation batch_size must be positive".into()));
    }
    let modalities = model.config().modalities.clone();
    let c = model.config().label_count;
    let labels = ds.label_matrix(indices)?;
    let mut probs = Tensor::<T>::zeros(&[indices.len(), c]);
    let mut rng = Rng::new(0); // inference: dropout inactive, draws unused
    let mut row = 0;
    for chunk in indices.chunks(batch_size) {
        let (batch, _) = ds.make_batch::<T>(chunk, &modalities)?;
        let p = model.forward(&batch, Phase::Infer, &mut rng)?;
        probs.data_mut()[row * c..(row + chunk.len()) * c].copy_from_slice(p.data());
        row += chunk.len();
    }
    let counts = confusion(&probs, &labels, threshold)?;
    Ok(FoldReport::from_counts(&counts))
}

/// Model checkpoint plus optimizer state, in one directory.
pub fn save_train_checkpoint<T: Scalar>(
    dir: &Path,
    model: &Model<T>,
    adam: &Adam,
) -> Result<(), TrainError> {
    checkpoint_save(model, dir)?;
    adam.save(dir)?;
    Ok(())
}

/// Loads a directory written by [`save_train_checkpoint`], checking that
/// the optimizer state belongs to the model state.
pub fn load_train_checkpoint<T: Scalar>(dir: &Path) -> Result<(Model<T>, Adam), TrainError> {
    let model = checkpoint_load::<T>(dir)?;
    let adam = Adam::load(dir, &model.params())?;
    if adam.t() != model.step() {
        return Err(TrainError::Plan(format!(
            "checkpoint mismatch: optimizer at t={} but model at step {}",
            adam.t(),
            model.step()
        )));
    }
    Ok((model, adam))
}
