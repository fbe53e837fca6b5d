//! Finite-difference probing of the assembled model: the training loss
//! (masked weighted BCE plus regularization) as a function of every
//! parameter coordinate, with dropout replayed from a fixed seed so the
//! loss is deterministic across evaluations.

use super::{Batch, Model, ModelConfig, ModelError};
use crate::layers::{check_gradients, GradReport, GradTarget, LayerError, Phase};
use crate::objective::{weighted_masked_bce_from_logits, LabelMatrix, WeightMatrix};
use crate::tensor::{Rng, Tensor};

/// Central-difference step used by [`model_gradcheck`].
pub const MODEL_GRADCHECK_H: f64 = 1e-5;
/// Relative-error tolerance used by [`model_gradcheck`].
pub const MODEL_GRADCHECK_TOL: f64 = 1e-4;

/// Checks `samples` randomly chosen parameter coordinates of the full model
/// against 64-bit central differences (step [`MODEL_GRADCHECK_H`], tolerance
/// [`MODEL_GRADCHECK_TOL`]). The probe batch, labels, dropout masks, and the
/// coordinate sample are all derived from `seed`.
pub fn model_gradcheck(
    config: &ModelConfig,
    seed: u64,
    batch_size: usize,
    samples: usize,
) -> Result<GradReport, ModelError> {
    let mut probe = ModelProbe::new(config, seed, batch_size)?;
    let mut rng = Rng::stream(seed, 101);
    let report = check_gradients(
        &mut probe,
        &mut rng,
        MODEL_GRADCHECK_H,
        MODEL_GRADCHECK_TOL,
        samples,
    )?;
    Ok(report)
}

fn to_layer(e: ModelError) -> LayerError {
    LayerError::GradCheck(e.to_string())
}

/// A built model with one fixed random batch and label table, exposing the
/// parameter space to [`check_gradients`](crate::layers::check_gradients).
pub struct ModelProbe {
    model: Model<f64>,
    batch: Batch<f64>,
    labels: LabelMatrix,
    psi: WeightMatrix,
    dropout_seed: u64,
}

impl ModelProbe {
    /// Builds `config` at `seed` with a gaussian input batch of
    /// `batch_size` instances and labels that include missing entries.
    pub fn new(config: &ModelConfig, seed: u64, batch_size: usize) -> Result<Self, ModelError> {
        if batch_size == 0 {
            return Err(ModelError::Batch("probe batch must be non-empty".into()));
        }
        let config = config.normalized()?;
        let model: Model<f64> = Model::build(&config, seed)?;
        let mut rng = Rng::stream(seed, 77);
        let mut batch = Batch::new();
        for &m in &config.modalities {
            let v = batch.modality_mut(m);
            for _ in 0..batch_size {
                let t = match config.stream_geom(m) {
                    Some(g) => {
                        let mut t = Tensor::<f64>::zeros(&[g.input_len, g.input_ch]);
                        for x in t.data_mut() {
                            *x = rng.gaussian();
                        }
                        t
                    }
                    None => {
                        let mut t = Tensor::<f64>::zeros(&[config.ps_width]);
                        for x in t.data_mut() {
                            *x = if rng.next_f64() < 0.5 { 1.0 } else { 0.0 };
                        }
                        t
                    }
                };
                v.push(t);
            }
        }
        let mut labels = LabelMatrix::new(batch_size, config.label_count);
        for i in 0..batch_size {
            for j in 0..config.label_count {
                let r = rng.next_f64();
                // Mix of positives, negatives, and missing entries, so the
                // loss exercises the mask too.
                labels.set(i, j, if r < 0.15 { None } else { Some(r < 0.55) });
            }
        }
        let psi = WeightMatrix::uniform(&labels);
        Ok(ModelProbe {
            model,
            batch,
            labels,
            psi,
            dropout_seed: seed ^ 0xd0d0,
        })
    }

    pub fn param_count(&self) -> usize {
        self.model.params().iter().map(|p| p.value.len()).sum()
    }

    fn loss_only(&mut self) -> Result<f64, ModelError> {
        let mut rng = Rng::new(self.dropout_seed);
        if self.model.config().multi_task {
            let heads = self.model.forward_heads(&self.batch, Phase::Train, &mut rng)?;
            let mut total = 0.0;
            for (_, logits) in &heads {
                let (l, _) = weighted_masked_bce_from_logits(logits, &self.labels, &self.psi)?;
                total += l;
            }
            Ok(total + self.model.reg_value())
        } else {
            let logits = self
                .model
                .forward_logits(&self.batch, Phase::Train, &mut rng)?;
            let (loss, _) = weighted_masked_bce_from_logits(&logits, &self.labels, &self.psi)?;
            Ok(loss + self.model.reg_value())
        }
    }

    fn grads(&mut self) -> Result<Vec<f64>, ModelError> {
        self.model.zero_grads();
        let mut rng = Rng::new(self.dropout_seed);
        if self.model.config().multi_task {
            let heads = self.model.forward_heads(&self.batch, Phase::Train, &mut rng)?;
            let (_, grads) = self.model.multitask_loss(&heads, &self.labels, &self.psi)?;
            self.model.backward_heads(&grads)?;
        } else {
            let logits = self
                .model
                .forward_logits(&self.batch, Phase::Train, &mut rng)?;
            let (_, grad) = weighted_masked_bce_from_logits(&logits, &self.labels, &self.psi)?;
            self.model.apply_reg();
            self.model.backward(&grad)?;
        }
        Ok(self
            .model
            .params()
            .iter()
            .flat_map(|p| p.grad.data().iter().copied())
            .collect())
    }
}

impl GradTarget for ModelProbe {
    fn spans(&self) -> Vec<(String, usize)> {
        self.model
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.len()))
            .collect()
    }

    fn get_coord(&self, i: usize) -> f64 {
        let mut off = i;
        for p in self.model.params() {
            if off < p.value.len() {
                return p.value.data()[off];
            }
            off -= p.value.len();
        }
        panic!("coordinate {i} out of range");
    }

    fn set_coord(&mut self, i: usize, v: f64) {
        let mut off = i;
        for p in self.model.params_mut() {
            if off < p.value.len() {
                p.value.data_mut()[off] = v;
                return;
            }
            off -= p.value.len();
        }
        panic!("coordinate {i} out of range");
    }

    fn eval_loss(&mut self) -> Result<f64, LayerError> {
        self.loss_only().map_err(to_layer)
    }

    fn eval_grad(&mut self) -> Result<Vec<f64>, LayerError> {
        self.grads().map_err(to_layer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::check_gradients;
    use crate::model::{ConvChoice, Fusion};

    fn reduced(multi_task: bool) -> ModelConfig {
        ModelConfig {
            label_count: 5,
            ps_width: 6,
            filters: Some([4, 8]),
            shared_units: Some([16, 12]),
            multi_shared_units: Some(12),
            task_units: Some([10, 6]),
            multi_task,
            conv_kind: ConvChoice::Dps,
            fusion: Fusion::Gmp,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn reduced_single_task_model_passes() {
        let mut probe = ModelProbe::new(&reduced(false), 3, 2).unwrap();
        let mut rng = Rng::new(9);
        let report = check_gradients(&mut probe, &mut rng, 1e-5, 1e-4, 150).unwrap();
        assert!(report.pass, "{report}");
    }

    #[test]
    fn reduced_multi_task_model_passes() {
        let mut probe = ModelProbe::new(&reduced(true), 4, 2).unwrap();
        let mut rng = Rng::new(10);
        let report = check_gradients(&mut probe, &mut rng, 1e-5, 1e-4, 150).unwrap();
        assert!(report.pass, "{report}");
    }

    #[test]
    fn conv_fusion_model_passes() {
        let config = ModelConfig {
            fusion: Fusion::Conv,
            ..reduced(false)
        };
        let mut probe = ModelProbe::new(&config, 5, 2).unwrap();
        let mut rng = Rng::new(11);
        let report = check_gradients(&mut probe, &mut rng, 1e-5, 1e-4, 150).unwrap();
        assert!(report.pass, "{report}");
    }
}
